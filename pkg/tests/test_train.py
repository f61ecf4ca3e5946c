import copy

import numpy as np
import pytest

from refground import tensor as T
from refground.config import ExperimentConfig
from refground.data import Dataset, generate_dataset
from refground.errors import BadMagic, ConfigHashMismatch, PartitionViolation, TruncatedFile
from refground.model import forward, init_params, make_batch
from refground.pipeline import build_reference_gallery, evaluate, predict
from refground.store import MemoryBank
from refground.train import (
    Optimizer,
    audit_isolation,
    load_checkpoint,
    new_state,
    run_epochs,
    save_checkpoint,
    train_step,
)

SMALL = ExperimentConfig(d=16, heads=2, joint_heads=2, batch_size=8, epochs=2, optimizer="adam", lr=1e-3)


def small_dataset(seed=0, n=24):
    samples, records = generate_dataset(seed, n, 0.5)
    return Dataset([s for s in samples if s.split == "train"], [s for s in samples if s.split == "test"], records, {})


@pytest.fixture(scope="module")
def ds():
    return small_dataset()


def same_params(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_resume_matches_uninterrupted(tmp_path, ds):
    straight = run_epochs(new_state(SMALL), SMALL, ds)
    first = run_epochs(new_state(SMALL), SMALL, ds, until=1)
    save_checkpoint(tmp_path / "c.ckpt", first, SMALL)
    resumed = run_epochs(load_checkpoint(tmp_path / "c.ckpt", SMALL), SMALL, ds)
    assert resumed.epoch == straight.epoch == 2
    for k in straight.params:
        assert np.abs(straight.params[k].data - resumed.params[k].data).max() <= 1e-12


def test_checkpoint_round_trip_is_bitwise(tmp_path, ds):
    state = run_epochs(new_state(SMALL), SMALL, ds, until=1)
    save_checkpoint(tmp_path / "c.ckpt", state, SMALL)
    back = load_checkpoint(tmp_path / "c.ckpt", SMALL)
    assert same_params(state.params, back.params)
    assert back.optimizer.step_count == state.optimizer.step_count
    for k, v in state.optimizer.state.items():
        assert np.array_equal(v, back.optimizer.state[k])
    assert back.history == state.history


def test_checkpoint_rejects_other_architecture(tmp_path):
    state = new_state(SMALL)
    save_checkpoint(tmp_path / "c.ckpt", state, SMALL)
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(tmp_path / "c.ckpt", SMALL.replace(d=32))
    # optimisation settings do not affect loadability
    load_checkpoint(tmp_path / "c.ckpt", SMALL.replace(lr=0.5, epochs=9))


def test_checkpoint_bad_files(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, new_state(SMALL), SMALL)
    raw = path.read_bytes()
    (tmp_path / "m.ckpt").write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(BadMagic):
        load_checkpoint(tmp_path / "m.ckpt", SMALL)
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "t.ckpt", SMALL)
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(TruncatedFile):
        load_checkpoint(tmp_path / "x.ckpt", SMALL)


def test_isolation_audit_catches_gallery_pairing(ds):
    assert audit_isolation(ds) == []
    bad = Dataset(list(ds.train), ds.test, ds.references, {})
    gallery_id = next(r.id for r in ds.references if r.partition == "gallery")
    bad.train[0] = type(bad.train[0])(**{**vars(bad.train[0]), "source_reference_id": gallery_id})
    assert [sid for sid, _ in audit_isolation(bad)] == [bad.train[0].id]
    with pytest.raises(PartitionViolation):
        run_epochs(new_state(SMALL), SMALL, bad)


def test_training_never_reads_gallery_payloads(ds):
    """Poison every gallery record; training must be unaffected."""
    clean = run_epochs(new_state(SMALL), SMALL, ds, until=1)
    refs = copy.deepcopy(ds.references)
    for r in refs:
        if r.partition == "gallery":
            r.image = np.full_like(r.image, np.nan)
    dirty = run_epochs(new_state(SMALL), SMALL, Dataset(ds.train, ds.test, refs, {}), until=1)
    assert same_params(clean.params, dirty.params)


def test_clipping_bounds_update_norm():
    p = {"w": T.parameter(np.zeros(3))}
    opt = Optimizer(p, "sgd", lr=1.0, momentum=0.0, clip=1.0)
    p["w"].grad = np.array([30.0, 40.0, 0.0])
    assert opt.grad_norm() == 50.0
    opt.step()
    assert np.allclose(p["w"].data, [-0.6, -0.8, 0.0], atol=1e-15)


def test_weight_decay_shrinks_matrices_only():
    p = {"m": T.parameter(np.full((2, 2), 2.0)), "b": T.parameter(np.full(2, 2.0))}
    opt = Optimizer(p, "sgd", lr=0.1, momentum=0.0, weight_decay=0.5)
    for t in p.values():
        t.grad = np.zeros_like(t.data)
    opt.step()
    assert np.array_equal(p["m"].data, np.full((2, 2), 2.0 * 0.95))
    assert np.array_equal(p["b"].data, np.full(2, 2.0))


def test_memorizes_small_batch():
    cfg = SMALL.replace(lr=3e-3)
    ds = small_dataset(1, 12)
    bank = MemoryBank(ds.references, {s.id: s.source_reference_id for s in ds.train})
    batch = make_batch(ds.train[:8], [bank.pair(s.id) for s in ds.train[:8]])
    state = new_state(cfg)
    first = train_step(state, cfg, batch)["total"]
    for _ in range(60):
        last = train_step(state, cfg, batch)["total"]
    assert last < 0.5 * first


def test_forward_shapes_and_no_reference_ablation(ds):
    params = init_params(SMALL)
    refs = {r.id: r for r in ds.references}
    batch = make_batch(ds.train[:4], [refs[s.source_reference_id] for s in ds.train[:4]])
    out = forward(params, SMALL, batch)
    assert out.preds.bic.shape == (4, 2) and out.preds.img.shape == (4, 4)
    assert out.preds.mlc.shape == (4, 4) and out.preds.tmg.shape == (4, 16, 2)
    assert ((out.preds.img.data > 0) & (out.preds.img.data < 1)).all()
    blind = SMALL.replace(use_reference=False)
    other = make_batch(ds.train[:4], [refs[s.source_reference_id] for s in ds.train[4:8]])
    a = forward(params, blind, batch).preds.bic.data
    b = forward(params, blind, other).preds.bic.data
    assert np.array_equal(a, b)


def test_predict_and_skip_top(ds):
    params = init_params(SMALL)
    g = build_reference_gallery(params, SMALL, ds.records("gallery"))
    preds = predict(params, SMALL, ds.test, g)
    assert [p.sample_id for p in preds] == [s.id for s in ds.test]
    assert all(p.anchor_id == p.retrieved[0][0] for p in preds)
    skipped = predict(params, SMALL, ds.test, g, skip_top=1)
    assert all(p.anchor_id == p.retrieved[1][0] for p in skipped)
    m = evaluate(params, SMALL, ds.test, g).metrics
    assert m["n_samples"] == len(ds.test) and 0 <= m["ACC"] <= 1
