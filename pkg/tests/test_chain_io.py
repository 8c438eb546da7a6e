import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from jkoflow import chain_io, energy, icnn, jko, numcore
from jkoflow.errors import CorruptManifest, VersionMismatch
from jkoflow.jko import GaussianMeasure, JkoChain, TrainConfig
from oracles import random_icnn

FIXTURES = Path(__file__).parent / "fixtures"


def _same_bits(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype == np.float64
        assert a[k].shape == b[k].shape
        assert a[k].tobytes() == b[k].tobytes(), k


@pytest.fixture(scope="module")
def trained_chain():
    rng = numcore.make_rng(0)
    cfg = TrainConfig(iters=30, lr=1e-2, batch=64, width=6, pretrain_iters=500)
    chain = JkoChain(GaussianMeasure(np.zeros(2), np.eye(2)), h=0.1, inv_beta=1.0, config_hash="abc")
    for _ in range(2):
        chain, _ = jko.jko_train_step(chain, energy.Quadratic(np.eye(2), np.ones(2)), cfg, rng)
    return chain


def test_params_round_trip_bitwise(tmp_path):
    p = random_icnn(3, np.random.default_rng(0))
    p.B[0, 1] = -0.0
    p.A[0][0, 0] = 5e-324  # subnormal survives
    q = chain_io.load_params(chain_io.save_params(p, tmp_path))
    _same_bits(p.tensors(), q.tensors())
    assert q.alpha == p.alpha


def test_chain_round_trip_bitwise(tmp_path, trained_chain):
    chain_io.save_chain(trained_chain, tmp_path / "c")
    back = chain_io.load_chain(tmp_path / "c")
    assert back.n_steps == 2 and back.h == trained_chain.h and back.inv_beta == trained_chain.inv_beta
    assert back.config_hash == "abc"
    for a, b in zip(trained_chain.maps, back.maps):
        _same_bits(a.tensors(), b.tensors())
    X = np.random.default_rng(1).normal(size=(10, 2))
    np.testing.assert_array_equal(back.push(X), trained_chain.push(X))


def test_deleted_blob(tmp_path, trained_chain):
    chain_io.save_chain(trained_chain, tmp_path)
    (tmp_path / "step_002" / "icnn.W0.bin").unlink()
    with pytest.raises(CorruptManifest):
        chain_io.load_chain(tmp_path)


def test_tampered_blob_and_manifest(tmp_path, trained_chain):
    chain_io.save_chain(trained_chain, tmp_path)
    blob = tmp_path / "step_001" / "icnn.B.bin"
    data = bytearray(blob.read_bytes())
    data[0] ^= 1
    blob.write_bytes(bytes(data))
    with pytest.raises(CorruptManifest, match="checksum"):
        chain_io.load_chain(tmp_path)
    chain_io.save_chain(trained_chain, tmp_path)
    m = tmp_path / "step_001" / "icnn.json"
    meta = json.loads(m.read_text())
    meta["alpha"] = 1.0
    m.write_text(json.dumps(meta, indent=1))
    with pytest.raises(CorruptManifest, match="content hash"):
        chain_io.load_chain(tmp_path)


def test_missing_or_garbled_chain_json(tmp_path):
    with pytest.raises(CorruptManifest):
        chain_io.load_chain(tmp_path)
    (tmp_path / "chain.json").write_text("{not json")
    with pytest.raises(CorruptManifest):
        chain_io.load_chain(tmp_path)


def test_version_mismatch(tmp_path, trained_chain):
    chain_io.save_chain(trained_chain, tmp_path)
    path = tmp_path / "chain.json"
    meta = json.loads(path.read_text())
    meta["format_version"] = 99
    path.write_text(json.dumps(meta))
    with pytest.raises(VersionMismatch):
        chain_io.load_chain(tmp_path)


def test_committed_fixture_loads_exact_values(tmp_path):
    # the fixture is little-endian on disk whatever the host byte order
    chain = chain_io.load_chain(FIXTURES / "chain")
    expected = json.loads((FIXTURES / "chain_expected.json").read_text())
    assert chain.n_steps == len(expected)
    for k, psi in enumerate(chain.maps, start=1):
        for name, arr in psi.tensors().items():
            want = np.array([float.fromhex(v) for v in expected[f"step_{k:03d}"][name]])
            assert arr.ravel().tobytes() == want.tobytes()
    meta = json.loads((FIXTURES / "chain" / "step_001" / "icnn.json").read_text())
    assert meta["endianness"] == "little" and meta["dtype"] == "float64"
    # re-saving reproduces the committed blobs byte for byte
    shutil.copytree(FIXTURES / "chain", tmp_path / "orig")
    chain_io.save_chain(chain, tmp_path / "again")
    for f in sorted((tmp_path / "orig").rglob("*.bin")):
        assert f.read_bytes() == (tmp_path / "again" / f.relative_to(tmp_path / "orig")).read_bytes()


def test_identity_chain_round_trip(tmp_path):
    chain = JkoChain(GaussianMeasure([1.0], [[2.0]]), [icnn.zero_params(1)])
    chain_io.save_chain(chain, tmp_path)
    back = chain_io.load_chain(tmp_path)
    x = np.linspace(-3, 3, 5)[:, None]
    np.testing.assert_array_equal(jko.density_at(back, x), jko.density_at(chain, x))
