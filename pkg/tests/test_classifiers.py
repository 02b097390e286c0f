import numpy as np
import pytest
import torch
from torch.nn import functional as F

from rlmia.classifiers import (AttackClassifier, CausalConv1d, ChannelWhitening, ClassifierError, ResNetConfig,
                               TcnConfig, TrainingDivergedError, TrainSpec, build_network, count_parameters,
                               gradient_check, predict_membership, train_attack)
from rlmia.dataset import COLLECTIVE, INDIVIDUAL, AttackDataset, PairedSample, split_of_seed

TINY_TCN = TcnConfig(levels=2, channels=4, kernel_size=3, dropout=0.5)
TINY_RESNET = ResNetConfig(stages=1, blocks_per_stage=1, base_channels=4)


def separable_dataset(n=400, d_a=2, L=10, seed=0) -> AttackDataset:
    """Positives: bottom half copies the top half. Negatives: independent halves."""
    rng = np.random.default_rng(seed)
    top = rng.uniform(-1, 1, size=(n, d_a, L))
    other = rng.uniform(-1, 1, size=(n, d_a, L))
    y = (np.arange(n) % 2).astype(np.int64)
    bottom = np.where(y[:, None, None] == 1, top, other)
    x = np.concatenate([top, bottom], axis=1).astype(np.float32)
    seeds = np.arange(n, dtype=np.int64)
    split = np.array([split_of_seed(int(s)) for s in seeds])
    return AttackDataset(INDIVIDUAL, x, y, seeds, split, d_a, L)


def collective_dataset(n=120, d_a=2, L=6, m=4, seed=0) -> AttackDataset:
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.int64)
    x = rng.normal(size=(n, 2 * d_a, L, m)).astype(np.float32)
    x[y == 1, d_a:] = x[y == 1, :d_a]
    seeds = np.arange(n * m, dtype=np.int64).reshape(n, m)
    split = np.array([split_of_seed(int(s[0])) for s in seeds])
    return AttackDataset(COLLECTIVE, x, y, seeds, split, d_a, L, m)


def probe(shape, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, *shape)), np.array([0, 1, 1, 0][:n], dtype=np.float64)


# ---------------------------------------------------------------- architectures

def test_receptive_field_formula_and_build_check():
    assert TcnConfig().receptive_field() == 1 + 2 * 2 * 15
    with pytest.raises(ClassifierError, match="receptive field"):
        build_network(TcnConfig(levels=1, kernel_size=2), (4, 50))
    with pytest.raises(ClassifierError):
        build_network(TcnConfig(), (4, 5, 3))


def test_tcn_first_and_last_steps_reach_the_logit():
    torch.manual_seed(0)
    L = TcnConfig().receptive_field()
    net = build_network(TcnConfig(), (4, L)).eval()
    x = torch.randn(1, 4, L)
    base = net(x)
    for t in (0, L - 1):
        bumped = x.clone()
        bumped[0, :, t] += 1.0
        assert abs((net(bumped) - base).item()) > 0


def test_tcn_is_causal_before_pooling():
    torch.manual_seed(0)
    net = build_network(TINY_TCN, (4, 12)).eval()
    x = torch.randn(1, 4, 12)
    h = net.blocks(x)
    x2 = x.clone()
    x2[0, :, 8] += 5.0
    h2 = net.blocks(x2)
    assert torch.equal(h[..., :8], h2[..., :8])
    assert not torch.equal(h[..., 8:], h2[..., 8:])


def causal_conv_weight_grad_oracle(x, w, c, dilation):
    """dL/dw for L = sum(c * conv(x)) by direct summation over the unrolled index map."""
    c_out, c_in, K = w.shape
    T = x.shape[-1]
    g = np.zeros_like(w)
    for o in range(c_out):
        for i in range(c_in):
            for k in range(K):
                shift = (K - 1 - k) * dilation
                for t in range(shift, T):
                    g[o, i, k] += c[o, t] * x[i, t - shift]
    return g


def unrolled_dense(w, T, dilation):
    """The causal dilated conv as a (C_out*T) x (C_in*T) matrix."""
    c_out, c_in, K = w.shape
    D = np.zeros((c_out * T, c_in * T))
    for o in range(c_out):
        for i in range(c_in):
            for k in range(K):
                shift = (K - 1 - k) * dilation
                for t in range(shift, T):
                    D[o * T + t, i * T + t - shift] += w[o, i, k]
    return D


@pytest.mark.parametrize("constant", [True, False])
@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_dilated_conv_gradients_match_unrolled_dense_layer(dilation, constant):
    torch.manual_seed(dilation)
    conv = CausalConv1d(3, 2, 3, dilation).double()
    T = 11
    rng = np.random.default_rng(dilation)
    x_np = np.full((3, T), 0.7) if constant else rng.normal(size=(3, T))
    c_np = rng.normal(size=(2, T))
    x = torch.tensor(x_np[None], requires_grad=True)
    out = conv(x)
    loss = (out[0] * torch.tensor(c_np)).sum()
    loss.backward()
    w = conv.weight.detach().numpy()
    b = conv.bias.detach().numpy()
    D = unrolled_dense(w, T, dilation)
    dense_out = (D @ x_np.reshape(-1)).reshape(2, T) + b[:, None]
    np.testing.assert_allclose(out.detach().numpy()[0], dense_out, rtol=0, atol=1e-12)
    # input gradient of the dense layer is D^T c
    np.testing.assert_allclose(x.grad.numpy()[0], (D.T @ c_np.reshape(-1)).reshape(3, T), rtol=0, atol=1e-12)
    np.testing.assert_allclose(conv.weight.grad.numpy(), causal_conv_weight_grad_oracle(x_np, w, c_np, dilation),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(conv.bias.grad.numpy(), c_np.sum(axis=1), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- gradient checks

def test_tiny_networks_fit_the_parameter_budget():
    assert count_parameters(build_network(TINY_TCN, (4, 8))) <= 500
    assert count_parameters(build_network(TINY_RESNET, (4, 6, 3))) <= 500


def test_gradient_check_tiny_tcn():
    x, y = probe((4, 8))
    assert gradient_check(TINY_TCN, x, y, n_params=100) < 1e-4


def test_gradient_check_tiny_resnet():
    x, y = probe((4, 6, 3))
    assert gradient_check(TINY_RESNET, x, y, n_params=100) < 1e-4


def test_final_bias_gradient_closed_form():
    x, y = probe((4, 8))
    torch.manual_seed(0)
    net = build_network(TINY_TCN, (4, 8)).double().eval()
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.fill_(0.3)
    xt = torch.tensor(x)
    loss = F.binary_cross_entropy_with_logits(net(xt), torch.tensor(y))
    loss.backward()
    p = 1 / (1 + np.exp(-0.3))
    assert net.head.bias.grad.item() == pytest.approx(np.mean(p - y), abs=1e-14)
    assert gradient_check(TINY_TCN, x, y, n_params=500, network=net) < 1e-4


# ---------------------------------------------------------------- training

def test_separable_task_is_learned_within_20_epochs():
    ds = separable_dataset()
    clf = train_attack(ds, TcnConfig(), TrainSpec(epochs=20, patience=20), seed=0)
    assert max(clf.metadata["history"]["val_acc"]) >= 0.95
    val = ds.subset("val")
    assert np.mean((clf.predict_proba(val.x) >= 0.5) == val.y) >= 0.95


def test_first_epoch_does_not_increase_training_loss():
    ds = separable_dataset()
    clf = train_attack(ds, TcnConfig(), TrainSpec(epochs=1), seed=0)
    train = ds.subset("train")
    x = torch.as_tensor(train.x)
    with torch.no_grad():
        after = F.binary_cross_entropy_with_logits(clf.network.eval()(x), torch.as_tensor(train.y).float()).item()
    assert after <= clf.metadata["initial_train_loss"]


def test_training_is_deterministic():
    ds = separable_dataset(n=120)
    a = train_attack(ds, TINY_TCN, TrainSpec(epochs=3), seed=5)
    b = train_attack(ds, TINY_TCN, TrainSpec(epochs=3), seed=5)
    assert a.metadata["history"] == b.metadata["history"]
    assert a.metadata["best_val_loss"] == b.metadata["best_val_loss"]


def test_rejections():
    ds = separable_dataset(n=40)
    with pytest.raises(ClassifierError, match="cannot train"):
        train_attack(ds, ResNetConfig(), TrainSpec(epochs=1))
    one = AttackDataset(INDIVIDUAL, ds.x[:1], ds.y[:1], ds.seeds[:1], np.array(["train"]), 2, 10)
    with pytest.raises(ClassifierError, match="both labels"):
        train_attack(one, TINY_TCN, TrainSpec(epochs=1))
    with pytest.raises(ValueError):
        TrainSpec(lr=0.0)


def test_nan_loss_aborts():
    ds = separable_dataset(n=60)
    x = ds.x.copy()
    x[:] = np.nan
    bad = AttackDataset(INDIVIDUAL, x, ds.y, ds.seeds, ds.split, 2, 10)
    with pytest.raises(TrainingDivergedError):
        train_attack(bad, TINY_TCN, TrainSpec(epochs=1))


def test_collective_training_runs_and_is_deterministic():
    ds = collective_dataset()
    a = train_attack(ds, TINY_RESNET, TrainSpec(epochs=2), seed=1)
    b = train_attack(ds, TINY_RESNET, TrainSpec(epochs=2), seed=1)
    assert a.metadata["history"] == b.metadata["history"]
    p = a.predict_proba(ds.x)
    assert np.all((p > 0) & (p < 1))


def test_collective_logit_depends_on_pair_order():
    torch.manual_seed(0)
    net = build_network(ResNetConfig(), (4, 6, 5)).eval()
    x = torch.randn(1, 4, 6, 5)
    perm = x[..., torch.tensor([4, 0, 3, 1, 2])]
    assert net(x).item() != net(perm).item()


def test_permuted_collective_training_is_reproducible():
    ds = collective_dataset()
    order = np.random.default_rng(0).permutation(ds.m)
    permuted = AttackDataset(COLLECTIVE, ds.x[..., order].copy(), ds.y, ds.seeds[:, order], ds.split, 2, 6, ds.m)
    a = train_attack(permuted, TINY_RESNET, TrainSpec(epochs=2), seed=2)
    b = train_attack(permuted, TINY_RESNET, TrainSpec(epochs=2), seed=2)
    assert a.metadata["history"]["train_loss"] == b.metadata["history"]["train_loss"]


# ---------------------------------------------------------------- prediction

@pytest.fixture(scope="module")
def small_classifier():
    return train_attack(separable_dataset(n=80), TINY_TCN, TrainSpec(epochs=2), seed=0)


def test_predictions_lie_strictly_inside_unit_interval(small_classifier):
    rng = np.random.default_rng(0)
    x = rng.normal(scale=100.0, size=(50, 4, 10)).astype(np.float32)
    p = small_classifier.predict_proba(x)
    assert np.all((p > 0) & (p < 1))


def test_predict_membership_is_pure_and_checks_shape(small_classifier):
    x = np.random.default_rng(1).normal(size=(4, 10)).astype(np.float32)
    s = PairedSample(x, 1, 0)
    assert predict_membership(small_classifier, s) == predict_membership(small_classifier, s)
    with pytest.raises(ClassifierError):
        predict_membership(small_classifier, np.zeros((4, 11), dtype=np.float32))


def test_zero_logit_gives_one_half():
    torch.manual_seed(0)
    net = build_network(TINY_TCN, (4, 10))
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    clf = AttackClassifier(net, TINY_TCN, (4, 10))
    assert predict_membership(clf, np.ones((4, 10), dtype=np.float32)) == 0.5


def test_checkpoint_round_trip(tmp_path, small_classifier):
    ds = separable_dataset(n=80)
    path = small_classifier.save(tmp_path / "clf", dataset_hash=ds.manifest_hash())
    back = AttackClassifier.load(path, "tcn")
    np.testing.assert_array_equal(back.predict_proba(ds.x), small_classifier.predict_proba(ds.x))
    assert back.config == small_classifier.config
    from rlmia.checkpoints import load_archive
    meta, _ = load_archive(path, "attack-tcn")
    assert meta["dataset_manifest_hash"] == ds.manifest_hash()


# ---------------------------------------------------------------- input whitening

def test_whitening_decorrelates_training_channels():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(200, 1, 12))
    # two nearly identical channel pairs: the difference direction has tiny variance
    x = np.concatenate([base, base + 0.05 * rng.normal(size=base.shape), rng.normal(size=(200, 2, 12))], axis=1)
    w = ChannelWhitening(4).fit(x)
    y = w(torch.as_tensor(x, dtype=torch.float32)).numpy()
    flat = np.moveaxis(y, 1, -1).reshape(-1, 4)
    np.testing.assert_allclose(flat.mean(0), 0.0, atol=1e-5)
    # identity up to the eps regulariser: V diag(lam / (lam + eps)) V^T
    lam, vecs = np.linalg.eigh(np.cov(np.moveaxis(x, 1, -1).reshape(-1, 4), rowvar=False))
    expected = vecs @ np.diag(lam / (lam + w.eps)) @ vecs.T
    np.testing.assert_allclose(np.cov(flat, rowvar=False), expected, atol=1e-4)
    assert np.allclose(expected, np.eye(4), atol=1e-2)


def test_unfitted_whitening_is_identity():
    x = torch.randn(3, 4, 5, 2)
    assert torch.equal(ChannelWhitening(4)(x), x)


def test_whitened_classifier_round_trip_and_gradients(tmp_path):
    ds = separable_dataset(n=80)
    cfg = TcnConfig(levels=2, channels=4, whiten=True)
    clf = train_attack(ds, cfg, TrainSpec(epochs=2), seed=0)
    assert not torch.equal(clf.network.whiten.matrix, torch.eye(4))
    back = AttackClassifier.load(clf.save(tmp_path / "w"), "tcn")
    np.testing.assert_array_equal(back.predict_proba(ds.x), clf.predict_proba(ds.x))
    x, y = probe((4, 8))
    assert gradient_check(cfg, x, y, n_params=100, network=build_network(cfg, (4, 8))) < 1e-4


def test_resnet_dropout_only_acts_in_training():
    torch.manual_seed(0)
    net = build_network(ResNetConfig(stages=1, blocks_per_stage=1, base_channels=4, dropout=0.5), (4, 6, 3))
    x = torch.randn(2, 4, 6, 3)
    net.eval()
    assert torch.equal(net(x), net(x))
    net.train()
    assert not torch.equal(net(x), net(x))
