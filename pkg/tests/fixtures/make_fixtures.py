"""Regenerate the committed test fixtures.

The LIBSVM files are synthetic stand-ins laid out like the public files
(same feature counts and label encodings); the real data is fetched with
``jkoflow fetch-data``. The chain fixture is a tiny 2-step, 2-D chain whose
tensor values are also listed as ``float.hex`` strings in ``chain_expected.json``.
"""
import json
import shutil
from pathlib import Path

import numpy as np

from jkoflow import chain_io, icnn
from jkoflow.jko import GaussianMeasure, JkoChain

HERE = Path(__file__).parent


def _fmt(v):
    return f"{v:.6g}"


def diabetes_like(rng, n=300):
    # 8 dense features, labels +1/-1
    lines = []
    for _ in range(n):
        x = np.round(rng.normal(size=8), 6)
        y = 1 if x[:3].sum() + 0.5 * rng.normal() > 0 else -1
        lines.append(f"{y:+d} " + " ".join(f"{j + 1}:{_fmt(v)}" for j, v in enumerate(x)))
    return "\n".join(lines) + "\n"


def covtype_like(rng, n=200):
    # 10 quantitative features then 44 sparse one-hot indicators, labels 1/2
    lines = []
    for _ in range(n):
        q = np.round(rng.uniform(0, 3000, size=10), 0)
        area, soil = rng.integers(11, 15), rng.integers(15, 55)
        items = [f"{j + 1}:{_fmt(v)}" for j, v in enumerate(q) if v != 0]
        items += [f"{area}:1", f"{soil}:1"]
        lines.append(f"{rng.integers(1, 3)} " + " ".join(items))
    return "\n".join(lines) + "\n"


def chain_fixture():
    rng = np.random.default_rng(2024)
    maps = []
    for _ in range(2):
        p = icnn.random_params(2, [3, 3], rng, alpha=0.1)
        p.b = [rng.normal(size=3), rng.normal(size=3)]
        p.B = rng.normal(size=(2, 2)) * 0.3
        maps.append(p)
    chain = JkoChain(GaussianMeasure([0.5, -0.25], [[1.0, 0.2], [0.2, 0.5]]), maps, h=0.1, inv_beta=1.0)
    out = HERE / "chain"
    shutil.rmtree(out, ignore_errors=True)
    chain_io.save_chain(chain, out)
    expected = {f"step_{k:03d}": {n: [float(v).hex() for v in a.ravel()] for n, a in p.tensors().items()}
                for k, p in enumerate(maps, start=1)}
    (HERE / "chain_expected.json").write_text(json.dumps(expected, indent=1))


if __name__ == "__main__":
    rng = np.random.default_rng(7)
    (HERE / "diabetes_subset.libsvm").write_text(diabetes_like(rng))
    (HERE / "covtype_subset.libsvm").write_text(covtype_like(rng))
    chain_fixture()
