"""Hidden-state spectra for comparing teacher and student representations."""

from __future__ import annotations

import csv
import os

import numpy as np

from hetdistill import tensor as T
from hetdistill.checkpoint import Checkpoint
from hetdistill.errors import DimensionError, InputError


def singular_values(features) -> np.ndarray:
    """Singular values of a 2-D feature matrix, sorted in descending order."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {x.shape}")
    if x.size == 0:
        raise InputError("empty feature matrix")
    return np.linalg.svd(x, compute_uv=False)


def hidden_matrix(ckpt: Checkpoint, data, batch_size: int = 64) -> np.ndarray:
    """Final hidden states of every record stacked into an ``(N*L, D)`` matrix."""
    from hetdistill.training import _as_data, _encoder_from

    data = _as_data(data)
    if len(data) == 0:
        raise InputError("data is empty")
    model = _encoder_from(ckpt)
    tokens = data.tokens(model.cfg.tokenizer).astype(model.params["pos"].dtype, copy=False)
    chunks = []
    with T.no_grad():
        for lo in range(0, len(data), batch_size):
            chunks.append(model(tokens[lo:lo + batch_size]).hidden.data)
    h = np.concatenate(chunks).astype(np.float64)
    return h.reshape(-1, h.shape[-1])


def write_spectra(spectra: dict, path) -> str:
    """Write named spectra side by side; shorter columns are left blank.

    Columns are ``index`` followed by one raw and one max-normalised column per
    model.
    """
    path = os.fspath(path)
    names = list(spectra)
    depth = max(len(s) for s in spectra.values())
    header = ["index"]
    for n in names:
        header += [n, f"{n}_normalized"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(depth):
            row = [i]
            for n in names:
                s = spectra[n]
                if i < len(s):
                    row += [repr(float(s[i])), repr(float(s[i] / s[0])) if s[0] > 0 else "0.0"]
                else:
                    row += ["", ""]
            writer.writerow(row)
    return path


def read_spectra(path) -> dict:
    with open(os.fspath(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for col, name in enumerate(header):
        if col == 0 or name.endswith("_normalized"):
            continue
        out[name] = np.array([float(r[col]) for r in body if r[col] != ""])
    return out


def svd_spectrum(ckpt: Checkpoint, data, path, teacher: Checkpoint | None = None) -> dict:
    """Singular values of the final hidden states, written to ``path`` as CSV.

    With ``teacher`` given, both models' spectra go into the same file under
    the columns ``student`` and ``teacher``; otherwise the column is named after
    the checkpoint's role.
    """
    spectra = {}
    if teacher is not None:
        spectra["student"] = singular_values(hidden_matrix(ckpt, data))
        spectra["teacher"] = singular_values(hidden_matrix(teacher, data))
    else:
        spectra[ckpt.config.get("role", "model")] = singular_values(hidden_matrix(ckpt, data))
    write_spectra(spectra, path)
    return spectra
