from epictrl.cli import main

raise SystemExit(main())
