"""Allow ``python -m hiergrain``."""

from .cli import main

raise SystemExit(main())
