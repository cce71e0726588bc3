"""Pool-based active learning simulator for sequence tasks with multiple correct answers."""

__version__ = "0.1.0"
