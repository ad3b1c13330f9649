import hashlib
from typing import Union

import numpy as np

Label = Union[str, int]


def derive_seed(root: int, *labels: Label) -> int:
    """由根種子與標籤派生子種子（SHA-256，平台無關）"""
    text = "/".join([str(int(root))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def make_rng(root: int, *labels: Label) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
