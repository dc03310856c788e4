"""Module entry: python -m fssexport ..."""

from .cli import main

raise SystemExit(main())
