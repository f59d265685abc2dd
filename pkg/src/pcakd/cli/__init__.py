"""Command-line front end: image and corpus I/O, serialization, plots."""
