import numpy as np
import pytest
import torch

from cloudray.model import (AdamState, CloudRayModel, LossWeights, ModelConfig,
                            ModelOutput, NumericError, Schedule, adam_step,
                            assemble_features, blended_color, init_params,
                            load_checkpoint, lr_schedule, save_checkpoint,
                            training_loss)

CFG = ModelConfig()


def random_inputs(rng, b=4, k=8, dtype=torch.float32, valid=None):
    feats = torch.tensor(rng.normal(scale=0.3, size=(b, k, CFG.feature_dim)),
                         dtype=dtype)
    mask = torch.ones(b, k, dtype=torch.bool)
    if valid is not None:
        mask[:] = False
        for i, v in enumerate(valid):
            mask[i, :v] = True
        feats = feats * mask[..., None].to(dtype)
    return feats, mask


def test_init_deterministic_and_finite():
    a = init_params(CFG, seed=123)
    b = init_params(CFG, seed=123)
    c = init_params(CFG, seed=124)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert set(sa) == set(sb) == set(sc)
    differs = False
    for k in sa:
        assert torch.isfinite(sa[k]).all()
        assert torch.equal(sa[k], sb[k])
        differs |= not torch.equal(sa[k], sc[k])
    assert differs


def test_init_weight_distribution():
    model = init_params(CFG, seed=0)
    w = model.embed1.weight
    bound = 1.0 / np.sqrt(CFG.feature_dim)
    assert w.abs().max() <= bound
    assert abs(float(model.token.std()) - 0.02) < 0.01


def test_single_valid_neighbor_gets_full_weight():
    rng = np.random.default_rng(0)
    model = init_params(CFG, seed=0)
    feats, mask = random_inputs(rng, b=3, k=6, valid=[1, 1, 1])
    out = model(feats, mask)
    assert torch.allclose(out.weights[:, 0], torch.ones(3))
    assert torch.allclose(out.weights[:, 1:], torch.zeros(3, 5))


def test_eval_mode_is_deterministic():
    rng = np.random.default_rng(1)
    model = init_params(CFG, seed=0)
    feats, mask = random_inputs(rng)
    a = model(feats, mask)
    b = model(feats, mask)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_dropout_requires_rng_and_perturbs():
    rng = np.random.default_rng(2)
    model = init_params(CFG, seed=0)
    feats, mask = random_inputs(rng)
    with pytest.raises(ValueError):
        model(feats, mask, train_mode=True)
    g1 = torch.Generator().manual_seed(7)
    g2 = torch.Generator().manual_seed(7)
    a = model(feats, mask, train_mode=True, rng=g1)
    b = model(feats, mask, train_mode=True, rng=g2)
    assert torch.equal(a.t, b.t)       # same dropout stream
    c = model(feats, mask, train_mode=True, rng=torch.Generator().manual_seed(8))
    assert not torch.equal(a.t, c.t)


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    model = init_params(CFG, seed=0)
    for _ in range(20):
        k = int(rng.integers(2, 12))
        feats, mask = random_inputs(rng, b=1, k=k)
        out = model(feats, mask)
        perm = rng.permutation(k)
        out_p = model(feats[:, perm], mask)
        assert abs(float(out.hit_prob - out_p.hit_prob)) < 1e-5
        assert abs(float(out.t - out_p.t)) < 1e-5
        assert float((out.normal - out_p.normal).abs().max()) < 1e-5
        assert float((out.weights[:, perm] - out_p.weights).abs().max()) < 1e-5


def test_weights_form_distribution_over_valid():
    rng = np.random.default_rng(4)
    model = init_params(CFG, seed=1)
    feats, mask = random_inputs(rng, b=5, k=9, valid=[1, 3, 5, 7, 9])
    out = model(feats, mask)
    w = out.weights
    assert (w >= 0).all()
    assert torch.allclose(w.sum(dim=1), torch.ones(5), atol=1e-6)
    assert float(w[~mask].abs().max()) == 0.0


def test_normal_is_unit():
    rng = np.random.default_rng(5)
    model = init_params(CFG, seed=2)
    feats, mask = random_inputs(rng, b=8, k=5)
    out = model(feats, mask)
    assert torch.allclose(torch.linalg.norm(out.normal, dim=1), torch.ones(8), atol=1e-6)


def test_nan_raises_numeric_error():
    rng = np.random.default_rng(6)
    model = init_params(CFG, seed=0)
    with torch.no_grad():
        model.head_t.weight.fill_(float("nan"))
    feats, mask = random_inputs(rng)
    with pytest.raises(NumericError):
        model(feats, mask)


# -- loss ---------------------------------------------------------------------

def make_pred(h, t, n, w):
    return ModelOutput(torch.tensor([h]), torch.tensor([t]),
                       torch.tensor([n]), torch.tensor([w]))


def test_loss_miss_ray_reduces_to_bce():
    pred = make_pred(0.3, 5.0, [0.0, 0.0, 1.0], [0.5, 0.5])
    colors = torch.full((1, 2, 3), 0.7)
    total, br = training_loss(pred, torch.tensor([False]), torch.tensor([0.0]),
                              torch.zeros(1, 3), torch.zeros(1, 3), colors)
    assert np.isclose(float(total), -np.log(1.0 - 0.3), atol=1e-6)
    assert br["t"] == br["normal"] == br["color"] == 0.0


def test_loss_perfect_prediction_vanishes():
    n = [0.0, 0.0, 1.0]
    pred = make_pred(1.0 - 1e-7, 2.0, n, [1.0, 0.0])
    colors = torch.tensor([[[0.25, 0.5, 0.75], [0.9, 0.9, 0.9]]])
    total, _ = training_loss(pred, torch.tensor([True]), torch.tensor([2.0]),
                             torch.tensor([n]), torch.tensor([[0.25, 0.5, 0.75]]),
                             colors)
    assert float(total) < 1e-5


def test_loss_perpendicular_normal_term_is_one():
    pred = make_pred(1.0 - 1e-7, 0.0, [1.0, 0.0, 0.0], [1.0])
    colors = torch.zeros(1, 1, 3)
    _, br = training_loss(pred, torch.tensor([True]), torch.tensor([0.0]),
                          torch.tensor([[0.0, 0.0, 1.0]]), torch.zeros(1, 3), colors)
    assert np.isclose(br["normal"], 1.0, atol=1e-6)


def test_loss_antiparallel_normal_is_free():
    # |n x n_gt|^2 is sign-blind: flipped normals carry no penalty
    pred = make_pred(1.0 - 1e-7, 0.0, [0.0, 0.0, -1.0], [1.0])
    _, br = training_loss(pred, torch.tensor([True]), torch.tensor([0.0]),
                          torch.tensor([[0.0, 0.0, 1.0]]), torch.zeros(1, 3),
                          torch.zeros(1, 1, 3))
    assert br["normal"] < 1e-12


def test_loss_nonnegative_random():
    rng = np.random.default_rng(7)
    for _ in range(50):
        w = rng.dirichlet([1.0, 1.0, 1.0])
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        pred = ModelOutput(torch.tensor([rng.uniform()], dtype=torch.float64),
                           torch.tensor([rng.normal()], dtype=torch.float64),
                           torch.tensor(n[None], dtype=torch.float64),
                           torch.tensor(w[None], dtype=torch.float64))
        gt_n = rng.normal(size=3)
        gt_n /= np.linalg.norm(gt_n)
        total, br = training_loss(
            pred, torch.tensor([bool(rng.integers(2))]),
            torch.tensor([rng.normal()], dtype=torch.float64),
            torch.tensor(gt_n[None], dtype=torch.float64),
            torch.tensor(rng.uniform(size=(1, 3)), dtype=torch.float64),
            torch.tensor(rng.uniform(size=(1, 3, 3)), dtype=torch.float64))
        assert float(total) >= 0.0
        assert all(v >= -1e-12 for v in br.values())


def test_blended_color_weights():
    w = torch.tensor([[0.5, 0.5], [1.0, 0.0]])
    c = torch.tensor([[[1.0, 0, 0], [0.0, 0, 1.0]], [[0.2, 0.3, 0.4], [0.9, 0.9, 0.9]]])
    out = blended_color(w, c)
    assert torch.allclose(out[0], torch.tensor([0.5, 0.0, 0.5]))
    assert torch.allclose(out[1], torch.tensor([0.2, 0.3, 0.4]))


# -- optimizer ----------------------------------------------------------------

def test_lr_schedule_formula():
    assert np.isclose(lr_schedule(4000, 1e-4, 4000), 1e-4)
    assert np.isclose(lr_schedule(1000, 1e-4, 4000), 0.25e-4)
    assert np.isclose(lr_schedule(16000, 1e-4, 4000), 0.5e-4)
    with pytest.raises(ValueError):
        lr_schedule(0, 1e-4, 4000)


def test_adam_zero_gradients_keep_params():
    model = init_params(CFG, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    state = AdamState.for_model(model)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    adam_step(model, state, 1, Schedule())
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_adam_descends_quadratic():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 1)
    state = AdamState(m={"weight": torch.zeros_like(lin.weight),
                         "bias": torch.zeros_like(lin.bias)},
                      v={"weight": torch.zeros_like(lin.weight),
                         "bias": torch.zeros_like(lin.bias)})
    x = torch.randn(64, 3)
    target = x @ torch.tensor([[1.0], [-2.0], [0.5]]) + 0.3
    losses = []
    for step in range(1, 400):
        out = lin(x)
        loss = ((out - target) ** 2).mean()
        lin.zero_grad()
        loss.backward()
        lr = lr_schedule(step, 0.05, 50)
        for name, p in lin.named_parameters():
            g = p.grad
            m, v = state.m[name], state.v[name]
            m.mul_(0.9).add_(g, alpha=0.1)
            v.mul_(0.98).addcmul_(g, g, value=0.02)
            with torch.no_grad():
                p -= lr * (m / (1 - 0.9 ** step)) / ((v / (1 - 0.98 ** step)).sqrt() + 1e-9)
        losses.append(float(loss))
    assert losses[-1] < losses[0] * 1e-2


def test_gradients_match_finite_differences():
    """Central differences on random parameter coordinates (float64)."""
    rng = np.random.default_rng(8)
    model = init_params(CFG, seed=3).double()
    feats, mask = random_inputs(rng, b=3, k=5, dtype=torch.float64, valid=[5, 3, 2])
    gt_hit = torch.tensor([True, True, False])
    gt_t = torch.tensor([0.5, -0.2, 0.0], dtype=torch.float64)
    gt_n = torch.tensor([[0, 0, 1.0], [0, 1.0, 0], [1.0, 0, 0]], dtype=torch.float64)
    gt_c = torch.tensor(rng.uniform(size=(3, 3)))
    colors = torch.tensor(rng.uniform(size=(3, 5, 3)))

    def loss_value():
        out = model(feats, mask)
        total, _ = training_loss(out, gt_hit, gt_t, gt_n, gt_c, colors)
        return total

    total = loss_value()
    model.zero_grad()
    total.backward()
    params = dict(model.named_parameters())
    names = sorted(params)
    step = 1e-4
    checked = 0
    for _ in range(25):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat = p.detach().reshape(-1)
        j = int(rng.integers(flat.numel()))
        orig = float(flat[j])
        with torch.no_grad():
            flat[j] = orig + step
            up = float(loss_value())
            flat[j] = orig - step
            dn = float(loss_value())
            flat[j] = orig
        fd = (up - dn) / (2 * step)
        an = float(p.grad.reshape(-1)[j])
        if abs(fd) < 1e-8 and abs(an) < 1e-8:
            continue
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-10)
        assert rel < 1e-3, (name, j, fd, an)
        checked += 1
    assert checked >= 10


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    model = init_params(CFG, seed=11)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    back = load_checkpoint(p1)
    assert back.cfg == model.cfg
    for k, v in model.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    model = init_params(CFG, seed=0)
    save_checkpoint(model, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_payload_mismatch(tmp_path):
    path = tmp_path / "trunc.ckpt"
    model = init_params(CFG, seed=0)
    save_checkpoint(model, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=65, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_t=0.0)
