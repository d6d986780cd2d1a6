"""The five document layout categories and their stable integer codes."""

from __future__ import annotations

import enum


class Category(enum.IntEnum):
    """Layout block category with a fixed code in 0..4.

    The code order is load-bearing: confusion matrices, report rows, and
    model output heads all index by it.
    """

    TEXT = 0
    TITLE = 1
    LIST = 2
    FIGURE = 3
    TABLE = 4

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_name(cls, name: str) -> "Category":
        """Resolve a category from a name, case-insensitively.

        Raises KeyError for unknown names; callers translate that into a
        SchemaError with context.
        """
        return _BY_NAME[name.strip().lower()]


_LABELS = {
    Category.TEXT: "Text",
    Category.TITLE: "Title",
    Category.LIST: "List",
    Category.FIGURE: "Figure",
    Category.TABLE: "Table",
}

_BY_NAME = {label.lower(): cat for cat, label in _LABELS.items()}

CATEGORIES = tuple(Category)
NUM_CATEGORIES = len(CATEGORIES)
CATEGORY_LABELS = tuple(c.label for c in CATEGORIES)
