import math

import numpy as np
import pytest
import torch

from trio_fundus import nets
from trio_fundus.nets import HeadConfig, TrainConfig
from trio_fundus.synthetic import generate_synthetic


def bce_by_terms(y, p, eps=1e-7):
    total = 0.0
    for yi, pi in zip(y, p):
        pi = min(max(pi, eps), 1 - eps)
        total += yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    return -total / len(y)


def test_bce_examples():
    assert nets.bce_loss([0], [0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert nets.bce_loss([1, 0], [0.9, 0.2]) == pytest.approx(0.1642520, abs=5e-8)
    assert nets.bce_loss([1], [1 - 1e-7]) <= 1.1e-7
    with pytest.raises(ValueError):
        nets.bce_loss([1, 0], [0.5])


def test_bce_matches_term_by_term():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        y = rng.integers(0, 2, n).astype(float)
        p = rng.uniform(0, 1, n)
        worst = max(worst, abs(nets.bce_loss(y, p) - bce_by_terms(y, p)))
    assert worst <= 1e-9


def test_bce_gradient_finite_difference():
    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(100):
        n = int(rng.integers(1, 8))
        y = rng.integers(0, 2, n).astype(float)
        p = rng.uniform(0.05, 0.95, n)
        g = nets.bce_loss_grad(y, p)
        i = int(rng.integers(n))
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        fd = (nets.bce_loss(y, up) - nets.bce_loss(y, dn)) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * abs(fd)


def test_torch_bce_agrees():
    rng = np.random.default_rng(2)
    y, p = rng.integers(0, 2, 50).astype(float), rng.uniform(0, 1, 50)
    t = nets.torch_bce(torch.tensor(p), torch.tensor(y))
    assert float(t) == pytest.approx(nets.bce_loss(y, p), abs=1e-12)


def test_contrastive_examples():
    assert nets.contrastive_loss(0.0, True) == 0.0
    assert nets.contrastive_loss(1.3, False, 1.0) == 0.0
    assert nets.contrastive_loss(0.4, False, 1.0) == pytest.approx(0.36, abs=1e-15)
    assert nets.contrastive_loss(0.5, True) == 0.25
    d = torch.tensor([0.0, 0.0, 1.0, 2.5])
    same = torch.tensor([1.0, 1.0, 0.0, 0.0])
    assert float(nets.torch_contrastive(d, same, 1.0)) == 0.0


def test_contrastive_gradient():
    h = 1e-6
    for d, s in [(0.3, True), (0.3, False), (0.9, False), (1.4, False)]:
        fd = (nets.contrastive_loss(d + h, s) - nets.contrastive_loss(d - h, s)) / (2 * h)
        assert nets.contrastive_loss_grad(d, s) == pytest.approx(fd, abs=1e-6)


def tiny(component=1, seed=0, **kw):
    return HeadConfig(component=component, backbone_id="tiny_backbone", head_dims=(32, 16),
                      input_size=64, seed=seed, **kw)


def test_feature_dim_and_range():
    assert nets.ComponentHead(HeadConfig(backbone_id="tiny_backbone", head_dims=(256, 128))).feature_dim == 128
    m = nets.ComponentHead(tiny()).eval()
    m2 = nets.build_component2(tiny()).eval()
    with torch.no_grad():
        assert 0.0 < float(m(torch.zeros(1, 3, 64, 64))) < 1.0
        assert 0.0 < float(m2(torch.zeros(1, 10, 64, 64))) < 1.0


def test_same_seed_same_init():
    x = torch.rand(4, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    a = nets.ComponentHead(tiny(seed=5)).eval()
    b = nets.ComponentHead(tiny(seed=5)).eval()
    c = nets.ComponentHead(tiny(seed=6)).eval()
    with torch.no_grad():
        assert torch.equal(a(x), b(x))
        assert not torch.equal(a(x), c(x))


def test_missing_pretrained_weights():
    with pytest.raises(nets.AssetError, match="weights"):
        nets.ComponentHead(HeadConfig(backbone_id="large_backbone", weights_path="/nonexistent.pth"))


def test_zero_filter_planes_equal_zeroed_projection():
    torch.manual_seed(0)
    x = torch.rand(2, 10, 64, 64)
    stripped = x.clone()
    stripped[:, 3:] = 0
    # pretrained path: the 1x1 projection is where filter planes enter
    m = nets.ComponentHead(HeadConfig(component=2, backbone_id="small_backbone", head_dims=(16, 8)),
                           load_pretrained=False).eval()
    ablated = nets.ComponentHead(HeadConfig(component=2, backbone_id="small_backbone", head_dims=(16, 8)),
                                 load_pretrained=False).eval()
    ablated.load_state_dict(m.state_dict())
    with torch.no_grad():
        ablated.proj.weight[:, 3:] = 0
        assert torch.equal(m(stripped), ablated(x))
    # tiny path: the first convolution plays the same role
    t = nets.ComponentHead(tiny(component=2)).eval()
    t2 = nets.ComponentHead(tiny(component=2)).eval()
    with torch.no_grad():
        t2.backbone.blocks[0].weight[:, 3:] = 0
        assert torch.allclose(t(stripped), t2(x), rtol=0, atol=1e-7)


def blob_data(n=200, seed=3):
    recs, imgs = generate_synthetic(n, ("DN",), seed=seed, co_occurrence=0.0)
    x = np.stack(imgs)
    y = np.array([int(r.has("DN")) for r in recs])
    return x, y


def test_head_learns_separable_set():
    x, y = blob_data()
    cut = 140
    cfg = TrainConfig(epochs=20, batch_size=16, learning_rate=2e-3, seed=1, early_stop_patience=20)
    m, hist = nets.train_binary_head(nets.ComponentHead(tiny(seed=1)), (x[:cut], y[:cut]),
                                     (x[cut:], y[cut:]), cfg)
    acc = ((nets.predict_proba(m, x[cut:]) >= 0.5) == y[cut:]).mean()
    assert acc >= 0.95
    assert 1 <= len(hist) <= 20


def test_training_reproducible():
    x, y = blob_data(60, seed=4)
    cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=1e-3, seed=2)
    runs = [nets.train_binary_head(nets.ComponentHead(tiny(seed=2)), (x[:40], y[:40]), (x[40:], y[40:]), cfg)[1]
            for _ in range(2)]
    assert runs[0].val_loss[-1] == runs[1].val_loss[-1]
    assert runs[0].train_loss == runs[1].train_loss


def test_zero_epochs_is_noop():
    m = nets.ComponentHead(tiny())
    before = {k: v.clone() for k, v in m.state_dict().items()}
    x, y = blob_data(20)
    _, hist = nets.train_binary_head(m, (x, y), None, TrainConfig(epochs=0))
    assert len(hist) == 0
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_nonfinite_loss_raises():
    x, y = blob_data(20)
    m = nets.ComponentHead(tiny())
    with torch.no_grad():
        m.out.bias.fill_(float("nan"))
    with pytest.raises(nets.TrainingDivergedError):
        nets.train_binary_head(m, (x, y), None, TrainConfig(epochs=2))


def test_callable_source_gets_epoch():
    x, y = blob_data(20)
    seen = []

    def source(epoch):
        seen.append(epoch)
        return x, y

    nets.train_binary_head(nets.ComponentHead(tiny()), source, None, TrainConfig(epochs=3))
    assert seen == [0, 1, 2]


def two_cluster_pairs(seed=0):
    recs, imgs = generate_synthetic(40, ("MYA",), seed=seed, co_occurrence=0.0)
    x = np.stack(imgs)
    y = np.array([int(r.has("MYA")) for r in recs])
    return x, y


def pair_arrays(x, y, idx, n, rng):
    pos, neg = [i for i in idx if y[i]], [i for i in idx if not y[i]]
    a, b, s = [], [], []
    for k in range(n):
        if k % 2 == 0:
            grp = pos if k % 4 == 0 else neg
            i, j = rng.choice(grp, 2, replace=False)
        else:
            i, j = rng.choice(pos), rng.choice(neg)
        a.append(i)
        b.append(j)
        s.append(int(k % 2 == 0))
    return x[a], x[b], np.array(s)


def test_siamese_separates_clusters():
    x, y = two_cluster_pairs()
    rng = np.random.default_rng(0)
    train_idx, test_idx = list(range(28)), list(range(28, 40))
    pairs = pair_arrays(x, y, train_idx, 200, rng)
    held = pair_arrays(x, y, test_idx, 100, rng)
    cfg = TrainConfig(epochs=30, batch_size=16, learning_rate=2e-3, seed=0, early_stop_patience=30)
    m, _ = nets.train_siamese(nets.SiameseModel(tiny(component=3, embedding_dim=8)), pairs, None, cfg)
    with torch.no_grad():
        d = m(nets.to_tensor(held[0]), nets.to_tensor(held[1])).numpy()
    same, diff = d[held[2] == 1].mean(), d[held[2] == 0].mean()
    assert same < 0.5 * diff


def test_siamese_identity_symmetry_and_features():
    m = nets.SiameseModel(tiny(component=3, embedding_dim=8)).eval()
    g = torch.Generator().manual_seed(1)
    a, b = torch.rand(5, 3, 64, 64, generator=g), torch.rand(5, 3, 64, 64, generator=g)
    with torch.no_grad():
        assert torch.equal(m(a, a), torch.zeros(5))
        assert torch.equal(m(a, b), m(b, a))
    x, y = two_cluster_pairs(1)
    nets.set_prototypes(m, x, y)
    f = nets.extract_features(m, x[:6], expected_dim=10)
    assert f.shape == (6, 8 + 2)
    assert np.array_equal(f, nets.extract_features(m, x[:6]))
    # independent prototype oracle
    with torch.no_grad():
        e = m.embed(nets.to_tensor(x)).double().numpy()
    pos_c, neg_c = e[y == 1].mean(axis=0), e[y == 0].mean(axis=0)
    assert np.abs(f[:, 8] - np.linalg.norm(e[:6] - pos_c, axis=1)).max() < 1e-6
    assert np.abs(f[:, 9] - np.linalg.norm(e[:6] - neg_c, axis=1)).max() < 1e-6
    with pytest.raises(nets.SchemaError):
        nets.extract_features(m, x[:2], expected_dim=11)


def test_component_roundtrip(tmp_path):
    x, y = blob_data(30)
    m, hist = nets.train_binary_head(nets.ComponentHead(tiny()), (x, y), (x, y), TrainConfig(epochs=2))
    nets.save_component(m, hist, tmp_path / "c1")
    back = nets.load_component(tmp_path / "c1")
    assert np.array_equal(nets.extract_features(back, x), nets.extract_features(m, x))
    h2 = nets.load_history(tmp_path / "c1")
    assert h2.train_loss == hist.train_loss
    s = nets.SiameseModel(tiny(component=3, embedding_dim=4))
    nets.set_prototypes(s, x, y)
    nets.save_component(s, nets.History(), tmp_path / "s")
    s2 = nets.load_component(tmp_path / "s")
    assert torch.equal(s2.prototypes, s.prototypes)
