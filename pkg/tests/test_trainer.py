import json

import numpy as np
import pytest

from mvdecor.data import DataError, Dataset, eligible_pairs
from mvdecor.mesh import read_labels
from mvdecor.nn import load_checkpoint
from mvdecor.trainer import (FewShotProtocol, correspondence_margin, evaluate, finetune, infer,
                             make_embed, pretrain, select_few_shot)


def params_of(path, cfg):
    net = make_embed(cfg, seed=123)
    load_checkpoint(path, [net])
    return {k: p.data for k, p in net.params.items()}


def test_eligible_pairs_threshold():
    t = np.eye(4)
    t[0, 1] = t[1, 0] = 0.10
    t[0, 2] = t[2, 0] = 0.15
    t[2, 3] = t[3, 2] = 0.9
    assert eligible_pairs(t, 0.15).tolist() == [[0, 2], [2, 3]]
    assert eligible_pairs(t, 0.05).tolist() == [[0, 1], [0, 2], [2, 3]]


def test_render_is_cached(tiny_ds, tiny_cfg):
    assert tiny_ds.render(tiny_cfg) == 0
    sid = tiny_ds.split("test")[0]
    assert tiny_ds.n_views(sid) == tiny_cfg.n_views
    t = tiny_ds.overlap(sid)
    np.testing.assert_array_equal(t, t.T)
    assert (np.diag(t) == 1).all()


def test_cache_root_from_env(tiny_root, tmp_path, monkeypatch):
    monkeypatch.setenv("MVDECOR_CACHE", str(tmp_path))
    ds = Dataset(tiny_root)
    assert str(ds.view_dir("shape_000")).startswith(str(tmp_path))
    assert Dataset(tiny_root, cache="").view_dir("shape_000") == tiny_root / "shapes/shape_000/views"


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        Dataset(tmp_path)


def test_zero_iterations_checkpoint_is_init(tiny_ds, tiny_cfg, tmp_path):
    cfg = tiny_cfg.with_(pretrain_iters=0)
    pretrain(tiny_ds, cfg, tmp_path)
    got = params_of(tmp_path / "embed.ckpt", cfg)
    init = make_embed(cfg)
    for k, p in init.params.items():
        np.testing.assert_array_equal(got[k], p.data)


def test_pretrain_reproducible(tiny_ds, tiny_cfg, tmp_path):
    _, c1 = pretrain(tiny_ds, tiny_cfg, tmp_path / "a")
    _, c2 = pretrain(tiny_ds, tiny_cfg, tmp_path / "b")
    assert c1 == c2
    assert (tmp_path / "a/embed.ckpt").read_bytes() == (tmp_path / "b/embed.ckpt").read_bytes()
    assert (tmp_path / "a/loss.csv").read_text() == (tmp_path / "b/loss.csv").read_text()
    prov = json.loads((tmp_path / "a/provenance.json").read_text())
    assert prov["config_hash"] == tiny_cfg.digest() and prov["stage"] == "pretrain"
    _, c3 = pretrain(tiny_ds, tiny_cfg.with_(seed=1), tmp_path / "c")
    assert c3 != c1


def test_selection_reproducible_and_v_limited(tiny_ds):
    a = select_few_shot(tiny_ds, FewShotProtocol(2, 3, 5))
    assert a == select_few_shot(tiny_ds, FewShotProtocol(2, 3, 5))
    shapes, views = a
    assert len(shapes) == 2 and set(shapes) <= set(tiny_ds.split("labeled_train"))
    assert all(len(views[s]) == 3 for s in shapes)
    _, allv = select_few_shot(tiny_ds, FewShotProtocol(1, "all", 0))
    assert all(v == list(range(tiny_ds.n_views(s))) for s, v in allv.items())
    with pytest.raises(DataError):
        select_few_shot(tiny_ds, FewShotProtocol(3, "all", 0))


def test_protocol_parse():
    assert FewShotProtocol.parse("k=2,v=3,seed=4") == FewShotProtocol(2, 3, 4)
    assert FewShotProtocol.parse("k=1,v=all").v == "all"
    with pytest.raises(ValueError):
        FewShotProtocol.parse("k=2,views=3")


def test_finetune_v3_only_touches_selected_views(tiny_ds, tiny_cfg, tmp_path):
    finetune(tiny_ds, tiny_cfg, FewShotProtocol(2, 3, 1), tmp_path)
    sel = json.loads((tmp_path / "selection.json").read_text())
    allowed = {(s, i) for s, vs in sel["views"].items() for i in vs}
    assert all(len(v) == 3 for v in sel["views"].values())
    assert {tuple(x) for x in sel["views_used"]} <= allowed


def test_lambda_wiring(tiny_ds, tiny_cfg, tmp_path):
    proto = FewShotProtocol(1, "all", 0)
    _, _, rows = finetune(tiny_ds, tiny_cfg, proto, tmp_path / "a")
    for _, total, sl, ssl, _ in rows:
        assert abs(total - (sl + tiny_cfg.lambda_reg * ssl)) <= 1e-6
        assert ssl > 0
    _, _, r0 = finetune(tiny_ds, tiny_cfg.with_(lambda_reg=0.0), proto, tmp_path / "b")
    assert all(total == sl and ssl == 0.0 for _, total, sl, ssl, _ in r0)
    # lambda=0 consumes the same supervised draws, so its first step matches
    assert r0[0][2] == rows[0][2]


def test_lr_step_decay(tiny_ds, tiny_cfg, tmp_path):
    _, _, rows = finetune(tiny_ds, tiny_cfg.with_(lambda_reg=0.0), FewShotProtocol(1, 2, 0), tmp_path)
    lrs = [r[4] for r in rows]
    expect = [tiny_cfg.lr * tiny_cfg.decay_factor ** (i // tiny_cfg.decay_every) for i in range(len(rows))]
    assert lrs == pytest.approx(expect, rel=1e-12)


def test_infer_and_evaluate(tiny_ds, tiny_cfg, tmp_path):
    finetune(tiny_ds, tiny_cfg, FewShotProtocol(1, "all", 0), tmp_path / "ft")
    cov = infer(tiny_ds, tiny_cfg, tmp_path / "ft/finetune.ckpt", tmp_path / "pred")
    assert sorted(cov) == tiny_ds.split("test")
    for sid in cov:
        lab = read_labels(tmp_path / f"pred/{sid}.txt", tiny_ds.n_classes)
        assert len(lab) == tiny_ds.mesh(sid).n_triangles and (lab.labels >= 0).all()
    miou, cm = evaluate(tiny_ds, tmp_path / "pred")
    assert 0 <= miou <= 1
    assert cm.counts.sum() == pytest.approx(sum(tiny_ds.mesh(s).areas().sum() for s in cov))
    with pytest.raises(DataError):
        evaluate(tiny_ds, tmp_path / "nowhere")


def test_margin_in_range(tiny_ds, tiny_cfg):
    m, r = correspondence_margin(make_embed(tiny_cfg), tiny_ds, tiny_ds.split("test"), tiny_cfg, n_pairs=3)
    assert -1 <= r <= 1 and -1 <= m <= 1
