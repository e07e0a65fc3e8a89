from kim.cli_io import main

raise SystemExit(main())
