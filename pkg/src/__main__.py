from src.app import main

raise SystemExit(main())
