"""Model checkpoints: velocity fields and surrogates in the network JSON format."""

from __future__ import annotations

from pathlib import Path

from .. import nncore
from ..exceptions import CheckpointError, DimensionError, ShapeError
from ..flowmatch import FlowMatcher
from ..physics import DropoutSurrogate

_KINDS = {"velocity": FlowMatcher, "surrogate": DropoutSurrogate}


def save_checkpoint(model, path):
    """Write any model exposing ``to_checkpoint`` to ``path``."""
    params, extra = model.to_checkpoint()
    path = Path(path)
    nncore.save_network(params, path, extra)
    return path


def load_checkpoint(path, expected_dim=None, kind=None):
    """Load a model; ``expected_dim`` guards against mixing design dimensions.

    Raises
    ------
    CheckpointError
        Unparsable or incomplete file.
    CheckpointVersionError
        Written with another schema version.
    DimensionError
        The stored design dimension differs from ``expected_dim``.
    """
    params, extra = nncore.load_network(path)
    found = extra.get("kind")
    if found not in _KINDS:
        raise CheckpointError(f"{path}: unknown model kind {found!r}")
    if kind is not None and found != kind:
        raise CheckpointError(f"{path}: holds a {found} model, expected {kind}")
    try:
        model = _KINDS[found].from_checkpoint(params, extra)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ShapeError):
            raise DimensionError(f"{path}: {exc}") from exc
        raise CheckpointError(f"{path}: incomplete checkpoint ({exc})") from exc
    if expected_dim is not None and model.n_features_in_ != expected_dim:
        raise DimensionError(
            f"{path}: checkpoint design dimension d={model.n_features_in_} "
            f"does not match experiment dimension d={expected_dim}"
        )
    return model
