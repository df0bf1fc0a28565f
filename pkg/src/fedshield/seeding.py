"""Master-seed fan-out.

Every random stream in an experiment is keyed by a child seed::

    child_seed(master, label, index) =
        uint64_le(SHA-256(f"{master}|{label}|{index}".encode("utf-8"))[:8])

``label`` names the role (``"cohort"``, ``"dropout"``, ``"client"``, ...) and
``index`` is usually the round number; nested roles join extra indices with
``"/"`` (e.g. ``label="client", index="3/17"``). Streams for distinct
(label, index) pairs are independent for all practical purposes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, label: str, index: int | str = 0) -> int:
    digest = hashlib.sha256(f"{master}|{label}|{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(master: int, label: str, index: int | str = 0) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, label, index))
