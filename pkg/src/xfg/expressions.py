"""The six basic facial expressions and their fixed index order.

Every module in the toolkit (oracles, manifests, masks, metrics tables)
uses this order; index 0 is also the tie-break winner wherever argmax
ties need resolving.
"""

EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")

_INDEX = {name: i for i, name in enumerate(EXPRESSIONS)}


def expression_index(name: str) -> int:
    """Map an expression name (case-insensitive) to its fixed index."""
    key = name.strip().lower()
    if key not in _INDEX:
        raise ValueError(f"unknown expression {name!r}; expected one of {EXPRESSIONS}")
    return _INDEX[key]


def expression_name(index: int) -> str:
    if not 0 <= index < len(EXPRESSIONS):
        raise ValueError(f"expression index out of range: {index}")
    return EXPRESSIONS[index]
