import itertools
import multiprocessing as mp

import numpy as np
import pytest

from bandssl.model import ModelConfig, RegressionHeadConfig, build_model
from bandssl.persistence import (
    METRIC_FIELDS,
    ExperimentRecord,
    IntegrityError,
    MetricsSchemaError,
    dataset_digest,
    load_checkpoint,
    load_metrics,
    param_digest,
    read_checkpoint,
    record_metrics,
    save_checkpoint,
    state_arrays,
)
from bandssl.synthsky import SynthConfig, generate_dataset
from bandssl.trainer import DEFAULT_FRACTIONS

CFG = ModelConfig(head=RegressionHeadConfig((4, 8), (32, 16)))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = build_model(CFG)
    path, digest = save_checkpoint(model, "finetune_ours", 7, tmp_path, {"fold": 3})
    assert path.name == "finetune_ours_e0007.ckpt.npz"
    loaded, manifest = load_checkpoint(path)
    assert manifest["epoch"] == 7 and manifest["fold"] == 3 and manifest["param_digest"] == digest
    a, b = state_arrays(model), state_arrays(loaded)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()


def test_pretext_only_checkpoint(tmp_path):
    model = build_model(CFG, with_regression=False)
    path, _ = save_checkpoint(model, "pretrain", 1, tmp_path)
    loaded, _ = load_checkpoint(path)
    assert loaded.regression_head is None and loaded.pretext_head is not None


def test_identical_params_identical_digest(tmp_path):
    a, b = build_model(CFG), build_model(CFG)
    assert param_digest(a) == param_digest(b)
    pa, da = save_checkpoint(a, "x", 1, tmp_path / "a")
    pb, db = save_checkpoint(b, "x", 1, tmp_path / "b")
    assert da == db


def test_tampered_checkpoint(tmp_path):
    path, _ = save_checkpoint(build_model(CFG), "pretrain", 1, tmp_path)
    arrays, manifest = read_checkpoint(path)
    key = next(k for k in arrays if arrays[k].dtype == np.float32)
    arrays[key] = arrays[key] + 1e-3
    payload = dict(arrays)
    import json

    payload["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    np.savez(path, **payload)
    with pytest.raises(IntegrityError, match="digest mismatch"):
        load_checkpoint(path)

    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_architecture_mismatch(tmp_path):
    from bandssl.persistence import load_state_into

    arrays = state_arrays(build_model(CFG))
    other = build_model(ModelConfig(head=RegressionHeadConfig((4, 8), (64, 16))))
    with pytest.raises(ValueError, match="checkpoint/architecture mismatch"):
        load_state_into(other, arrays)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match=str(blocker)):
        save_checkpoint(build_model(CFG), "pretrain", 1, blocker / "sub")


def _rows(n_fractions=12):
    rng = np.random.default_rng(0)
    rows = []
    for model, fraction, trial, fold in itertools.product(("base", "ours"), DEFAULT_FRACTIONS[:n_fractions], range(3), range(10)):
        rows.append({"model": model, "fraction": fraction, "trial": trial, "fold": fold,
                     "mae": float(rng.exponential()), "sigma": float(rng.exponential()), "seed": trial,
                     "timestamp": "2024-01-01T00:00:00+00:00"})
    return rows


def test_metrics_roundtrip_720(tmp_path):
    rows = _rows()
    assert len(rows) == 720
    path = tmp_path / "m.csv"
    record_metrics(rows, path)
    back = load_metrics(path)
    assert back == rows


def test_metrics_precision(tmp_path):
    vals = [0.1 + 0.2, 1 / 3, 2.0 ** -40, 123456.789012345678, np.nextafter(1.0, 2.0)]
    rows = [{"model": "ours", "fraction": 0.05, "trial": 0, "fold": 0, "mae": v, "sigma": v, "seed": 0} for v in vals]
    record_metrics(rows, tmp_path / "m.csv")
    for v, r in zip(vals, load_metrics(tmp_path / "m.csv")):
        assert r["mae"] == v
        assert abs(r["sigma"] - v) <= 1e-12 * abs(v)


def test_metrics_empty_and_schema(tmp_path):
    assert load_metrics(tmp_path / "none.csv") == []
    (tmp_path / "empty.csv").write_text("")
    assert load_metrics(tmp_path / "empty.csv") == []
    with pytest.raises(MetricsSchemaError):
        record_metrics([{"model": "base", "fraction": 1.0}], tmp_path / "bad.csv")
    (tmp_path / "other.csv").write_text("a,b\n1,2\n")
    with pytest.raises(MetricsSchemaError):
        load_metrics(tmp_path / "other.csv")
    record_metrics(_rows(1)[:1], tmp_path / "trunc.csv")
    with open(tmp_path / "trunc.csv", "a") as fh:
        fh.write("base,0.5,0\n")
    with pytest.raises(MetricsSchemaError, match=":4:"):
        load_metrics(tmp_path / "trunc.csv")


def _append_worker(args):
    path, worker = args
    for k in range(25):
        record_metrics([{"model": f"w{worker}", "fraction": 0.1, "trial": k, "fold": worker,
                         "mae": k / 7, "sigma": k / 11, "seed": worker}], path)


def test_concurrent_appends_do_not_interleave(tmp_path):
    path = str(tmp_path / "m.csv")
    with mp.get_context("fork").Pool(4) as pool:
        pool.map(_append_worker, [(path, w) for w in range(4)])
    rows = load_metrics(path)
    assert len(rows) == 100
    assert sorted((r["model"], r["trial"]) for r in rows) == sorted((f"w{w}", k) for w in range(4) for k in range(25))
    assert all(len(line.split(",")) == len(METRIC_FIELDS) for line in open(path).read().splitlines()[1:])


def test_experiment_record(tmp_path):
    ds = generate_dataset(SynthConfig(image_side=32, richness_range=(1, 5)), 3)
    path, digest = save_checkpoint(build_model(CFG), "pretrain", 1, tmp_path)
    rec = ExperimentRecord(manifest={"seed": 0, "alpha": 1.0}, dataset_digest=dataset_digest(ds))
    rec.add_checkpoint("pretrain", 1, path, digest)
    out = rec.finalize(tmp_path / "record.json")
    back = ExperimentRecord.load(out)
    assert back == rec and back.verify_dataset(ds)
    assert not back.verify_dataset(ds[:2])

    rec.metrics_path = str(tmp_path / "missing.csv")
    with pytest.raises(FileNotFoundError, match="missing.csv"):
        rec.finalize(tmp_path / "record2.json")


def test_dataset_digest_sensitivity():
    ds = generate_dataset(SynthConfig(image_side=32, richness_range=(1, 5)), 2)
    assert dataset_digest(ds) == dataset_digest(list(reversed(ds)))
    from bandssl.core_types import make_observation

    stack = ds[0].stacked().copy()
    stack[0, 0, 0] += 1
    changed = [make_observation(ds[0].cluster_id, stack, ds[0].richness), ds[1]]
    assert dataset_digest(changed) != dataset_digest(ds)
