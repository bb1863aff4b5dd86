"""Blue/green index cutover with validation and rollback.

The in-memory registry swaps a single reference under a lock; readers
acquire whichever artifact is active at call time and keep using that object
for the duration of their query, so a concurrent swap can never expose a
mixed state. The file-backed variant (used by the CLI) provides the same
contract across processes through an atomic rename of the registry file.
"""

from __future__ import annotations

import json
import os
import threading

import numpy as np

from ..errors import GuardrailError
from .artifact import IndexArtifact, load_index, recall_vs_exact


class IndexRegistry:
    def __init__(self):
        self._lock = threading.Lock()
        self._active: IndexArtifact | None = None
        self._previous: IndexArtifact | None = None

    def acquire(self) -> IndexArtifact | None:
        """Consistent artifact reference for one query; never a mixed state."""
        return self._active

    @property
    def previous(self) -> IndexArtifact | None:
        return self._previous

    def swap(self, new_artifact: IndexArtifact, validator=None) -> None:
        """Atomically activate ``new_artifact``; a failing validator refuses the swap.

        The validator runs before any state changes, so refusal leaves the
        registry untouched; the old artifact is retained for rollback.
        """
        if validator is not None:
            validator(new_artifact)
        with self._lock:
            self._previous = self._active
            self._active = new_artifact

    def rollback(self) -> None:
        with self._lock:
            if self._previous is None:
                raise GuardrailError("no previous artifact to roll back to")
            self._active, self._previous = self._previous, self._active


def probe_validator(k: int, ef_search: int, min_recall: float, n_probes: int = 50, seed: int = 0):
    """Validator factory: graph recall vs the exact oracle on the artifact's own payload."""

    def validate(artifact: IndexArtifact) -> None:
        rng = np.random.Generator(np.random.PCG64(seed))
        probes = rng.normal(size=(n_probes, artifact.store.dim)).astype(np.float32)
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        recall = recall_vs_exact(artifact, probes, k, ef_search)
        if recall < min_recall:
            raise GuardrailError(
                f"probe recall {recall:.3f} below guardrail {min_recall:.3f}; swap refused"
            )

    return validate


# ---------------------------------------------------------------------------
# file-backed registry (CLI)
# ---------------------------------------------------------------------------


def read_registry_file(path) -> dict:
    if not os.path.exists(path):
        return {"active": None, "previous": None, "history": []}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_registry_file(path, state: dict) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def swap_registry_file(path, artifact_path: str, validator=None) -> dict:
    """Validate the artifact file, then atomically point the registry at it."""
    artifact = load_index(artifact_path)
    if validator is not None:
        validator(artifact)
    state = read_registry_file(path)
    state["previous"] = state.get("active")
    state["active"] = str(artifact_path)
    state.setdefault("history", []).append(
        {"artifact": str(artifact_path), "index_id": artifact.index_id, "tte_id": artifact.tte_id}
    )
    _write_registry_file(path, state)
    return state


def rollback_registry_file(path) -> dict:
    state = read_registry_file(path)
    if not state.get("previous"):
        raise GuardrailError("no previous artifact recorded; cannot roll back")
    state["active"], state["previous"] = state["previous"], state["active"]
    _write_registry_file(path, state)
    return state
