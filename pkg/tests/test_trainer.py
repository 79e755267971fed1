import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import tiny_config
from dpcl.encoder import NonFiniteError, param_distance
from dpcl import trainer as T
from dpcl.trainer import (CheckpointError, fit, init_train_state, load_checkpoint, save_checkpoint,
                          segmentation_loss, sgd_step, total_loss, train_step)


def seg_oracle(sf, s_lab, qf, q_lab, classes, alpha):
    """Loop-based prototypes, cosine softmax and mean pixel cross-entropy."""
    sf, qf = sf.numpy(), qf.numpy()
    labels = [0] + list(classes)
    protos = []
    for c in labels:
        sel = [sf[s][:, y, x] for s in range(sf.shape[0]) for y in range(sf.shape[2]) for x in range(sf.shape[3])
               if s_lab[s, y, x] == c]
        protos.append(np.mean(sel, axis=0))
    losses = []
    for y in range(qf.shape[1]):
        for x in range(qf.shape[2]):
            f = qf[:, y, x]
            logits = [alpha * f @ p / (np.linalg.norm(f) * np.linalg.norm(p)) for p in protos]
            lse = math.log(sum(math.exp(l) for l in logits))
            losses.append(lse - logits[labels.index(int(q_lab[y, x]))])
    return float(np.mean(losses))


def test_segmentation_loss_matches_oracle(rng):
    sf = torch.from_numpy(rng.normal(size=(1, 5, 4, 4)))
    qf = torch.from_numpy(rng.normal(size=(5, 4, 4)))
    s_lab = np.zeros((1, 4, 4), int)
    s_lab[0, :2, :3] = 2
    q_lab = np.zeros((4, 4), int)
    q_lab[1:, 1:] = 2
    seg, align, protos = segmentation_loss(sf, s_lab, qf, q_lab, (2,), 20.0, align=True)
    assert seg.item() == pytest.approx(seg_oracle(sf, s_lab, qf, q_lab, (2,), 20.0), rel=1e-10)
    # alignment: prototypes from the query and its true mask, segmenting the support
    expected_align = seg_oracle(qf[None], q_lab[None], sf[0], s_lab[0], (2,), 20.0)
    assert align.item() == pytest.approx(expected_align, rel=1e-10)
    assert protos.labels == (0, 2)


def test_alignment_can_be_disabled(rng):
    sf = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    lab = np.zeros((1, 4, 4), int)
    lab[0, :2] = 1
    _, align, _ = segmentation_loss(sf, lab, sf[0], lab[0], (1,), 20.0, align=False)
    assert align is None


def test_alignment_skipped_when_query_lacks_class(rng):
    sf = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    lab = np.zeros((1, 4, 4), int)
    lab[0, :2] = 1
    seg, align, _ = segmentation_loss(sf, lab, sf[0], np.zeros((4, 4), int), (1,), 20.0)
    assert seg is not None and align is None


def test_total_loss_weights_and_omissions():
    one = torch.tensor(1.0)
    assert total_loss(one, one, one, one, 0.02, 0.015).item() == pytest.approx(2.035)
    assert total_loss(one, None, None, one, 0.02, 0.015).item() == pytest.approx(1.015)
    assert total_loss(None, None, None, None, 0.02, 0.015).item() == 0.0
    with pytest.raises(NonFiniteError):
        total_loss(one, torch.tensor(float("inf")), None, None, 0.02, 0.015)


@given(seed=st.integers(0, 2**32 - 1), lr=st.floats(1e-4, 1.0), mom=st.floats(0.0, 0.99),
       wd=st.floats(0.0, 1e-2), steps=st.integers(1, 4))
def test_sgd_matches_closed_form(seed, lr, mom, wd, steps):
    r = np.random.default_rng(seed)
    theta = r.normal(size=6)
    p = torch.from_numpy(theta.copy())
    buf = torch.zeros(6, dtype=torch.float64)
    ref_buf = np.zeros(6)
    for _ in range(steps):
        g = r.normal(size=6)
        sgd_step([p], [torch.from_numpy(g)], [buf], lr, mom, wd)
        ref_buf = mom * ref_buf + g + wd * theta
        theta = theta - lr * ref_buf
    assert np.allclose(p.numpy(), theta, rtol=1e-12, atol=1e-12)
    assert np.allclose(buf.numpy(), ref_buf, rtol=1e-12, atol=1e-12)


def test_sgd_rejects_non_finite():
    p = torch.zeros(2)
    with pytest.raises(NonFiniteError):
        sgd_step([p], [torch.tensor([1.0, float("nan")])], [torch.zeros(2)], 0.1, 0.9, 0.0)
    assert torch.equal(p, torch.zeros(2))


def test_init_state_twin_equals_encoder(tiny_cfg):
    s = init_train_state(tiny_cfg)
    assert param_distance(s.encoder, s.momentum_encoder) == 0.0
    assert s.step == 0 and s.dictionary.capacity == 16 and s.dictionary.dim == s.encoder.out_dim
    assert (s.dictionary.labels == -1).all()


def test_train_step_update_order(tiny_cfg):
    s = init_train_state(tiny_cfg)
    ds = T.dataset_for(tiny_cfg)
    fit(s, ds, max_iterations=3)
    old_twin = [p.clone() for p in s.momentum_encoder.parameters()]
    pushes = s.dictionary.pushes
    from dpcl.data import sample_episode, split_folds
    split = split_folds(ds.class_ids, 4, 0)
    ep = sample_episode(ds, split.train_classes, 1, 1, np.random.default_rng(7))
    report = train_step(s, [ep])
    assert s.step == 4 and report.step == 3
    m = tiny_cfg.nce.momentum
    for pm, p, old in zip(s.momentum_encoder.parameters(), s.encoder.parameters(), old_twin):
        assert torch.allclose(pm, m * old + (1 - m) * p, rtol=0, atol=1e-14)
    assert s.dictionary.pushes == pushes + 1
    assert math.isfinite(report.total)


def test_non_finite_step_leaves_state_untouched(tiny_cfg, monkeypatch):
    s = init_train_state(tiny_cfg)
    ds = T.dataset_for(tiny_cfg)
    fit(s, ds, max_iterations=2)
    before = [p.clone() for p in s.encoder.parameters()]
    twin = [p.clone() for p in s.momentum_encoder.parameters()]
    rng_state = s.rng.bit_generator.state
    dict_state = s.dictionary.state_dict()

    real = T.episode_losses

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        out.seg = out.seg * float("nan")
        return out

    monkeypatch.setattr(T, "episode_losses", poisoned)
    with pytest.raises(NonFiniteError):
        fit(s, ds, max_iterations=3)
    assert s.step == 2
    assert all(torch.equal(a, b) for a, b in zip(before, s.encoder.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(twin, s.momentum_encoder.parameters()))
    assert torch.equal(dict_state["vectors"], s.dictionary.vectors) and dict_state["ptr"] == s.dictionary.ptr
    # the rng rewinds to where the failing step started
    monkeypatch.undo()
    fresh = init_train_state(tiny_cfg)
    fit(fresh, ds, max_iterations=2)
    fresh.rng.integers(2**31 - 1)  # the episode draw happens before train_step
    assert s.rng.bit_generator.state == fresh.rng.bit_generator.state
    assert rng_state != s.rng.bit_generator.state


def _log_rows(path):
    with open(path) as fh:
        return [{k: v for k, v in row.items() if k != "wall_time"} for row in csv.DictReader(fh)]


def test_identical_seeds_give_identical_logs(tiny_cfg, tmp_path):
    a, b = init_train_state(tiny_cfg), init_train_state(tiny_cfg)
    fit(a, log_path=tmp_path / "a.csv", max_iterations=8)
    fit(b, log_path=tmp_path / "b.csv", max_iterations=8)
    assert _log_rows(tmp_path / "a.csv") == _log_rows(tmp_path / "b.csv")
    assert param_distance(a.encoder, b.encoder) == 0.0
    c = init_train_state(tiny_config(trainer={"seed": 1}))
    fit(c, log_path=tmp_path / "c.csv", max_iterations=8)
    assert _log_rows(tmp_path / "a.csv") != _log_rows(tmp_path / "c.csv")


def test_resume_matches_uninterrupted(tiny_cfg, tmp_path):
    full = init_train_state(tiny_cfg)
    fit(full, log_path=tmp_path / "full.csv", max_iterations=12)
    part = init_train_state(tiny_cfg)
    fit(part, log_path=tmp_path / "part.csv", max_iterations=5)
    save_checkpoint(part, tmp_path / "mid.pt")
    resumed = load_checkpoint(tmp_path / "mid.pt", tiny_cfg)
    fit(resumed, log_path=tmp_path / "part.csv", max_iterations=12)
    assert _log_rows(tmp_path / "full.csv") == _log_rows(tmp_path / "part.csv")
    for x, y in zip(full.encoder.parameters(), resumed.encoder.parameters()):
        assert torch.equal(x, y)
    for x, y in zip(full.momentum_encoder.parameters(), resumed.momentum_encoder.parameters()):
        assert torch.equal(x, y)
    for x, y in zip(full.buffers, resumed.buffers):
        assert torch.equal(x, y)
    assert torch.equal(full.dictionary.vectors, resumed.dictionary.vectors)
    assert full.dictionary.ptr == resumed.dictionary.ptr
    assert full.rng.bit_generator.state == resumed.rng.bit_generator.state


def test_fit_writes_periodic_checkpoints(tiny_cfg, tmp_path):
    s = init_train_state(tiny_cfg)
    fit(s, checkpoint_dir=tmp_path, max_iterations=10)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["last.pt", "step_000005.pt", "step_000010.pt"]
    assert load_checkpoint(tmp_path / "step_000005.pt").step == 5


def test_checkpoint_rejects_wrong_config(tiny_cfg, tmp_path):
    s = init_train_state(tiny_cfg)
    save_checkpoint(s, tmp_path / "c.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.pt", tiny_config(trainer={"lr": 0.5}))
    # run length and output location are not part of the trajectory identity
    load_checkpoint(tmp_path / "c.pt", tiny_config(trainer={"max_iterations": 99}, run_name="other"))


def test_checkpoint_rejects_foreign_files(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.pt")
    (tmp_path / "y.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "y.pt")


def test_skipped_terms_are_logged(tiny_cfg, tmp_path):
    cfg = tiny_config(nce={"cscl": False, "cacl": False})
    s = init_train_state(cfg)
    fit(s, log_path=tmp_path / "log.csv", max_iterations=3)
    rows = _log_rows(tmp_path / "log.csv")
    assert all(r["cs_skipped"] == "1" and r["ca_skipped"] == "1" for r in rows)
    assert s.dictionary.pushes == 0
