"""Regularizer term tests: zero at origin, closed-form oracles, gradients."""
import numpy as np
import pytest

import funcreg.tensor as T
from funcreg.errors import ConfigError, StateError
from funcreg.model import (EncoderParams, ModelState, PrototypeHead,
                           build_model)
from funcreg.regularizers import (METHODS, RegularizerConfig, car_loss,
                                  combined_loss, ema_distill_loss, far_loss,
                                  fcr_loss, l2sp_loss, ldifs_loss, lipsum_loss,
                                  sample_context_prototypes)
from funcreg.tensor import GradientTape, Tensor, backward


def snap_model(seed=0, input_dim=6, hidden=(5,), embed=4, k=3):
    m = build_model(input_dim, hidden, embed, k, seed=seed)
    m.take_snapshot()
    return m


def batch(seed=0, n=5, dim=6):
    return np.random.default_rng(seed).standard_normal((n, dim))


def test_every_term_is_zero_at_the_snapshot():
    m = snap_model()
    m.ema_init()
    x = batch()
    ctx = sample_context_prototypes(6, 4, seed=0)
    values = {
        "far": far_loss(m, x),
        "fcr": fcr_loss(m, x, x),  # x_aug = x at the origin
        "l2sp": l2sp_loss(m),
        "ldifs": ldifs_loss(m, x),
        "car": car_loss(m, x, ctx),
        "lipsum": lipsum_loss(m, x, n_probes=8, step_seed=0),
        "ema": ema_distill_loss(m, x),  # step 0: shadow equals live
    }
    for name, v in values.items():
        assert abs(v.item()) <= 1e-12, name


def test_l2sp_counts_only_encoder_distance():
    m = snap_model()
    m.head.prototypes.data += 10.0  # head moves are invisible to l2sp
    assert abs(l2sp_loss(m).item()) <= 1e-12
    m.encoder.layers[0][1].data += 0.5  # five bias entries
    assert abs(l2sp_loss(m).item() - 5 * 0.25) < 1e-12


def test_ldifs_zero_vs_identity_encoder_oracle():
    # live encoder = identity, snapshot encoder = zero: distance is mean |x|^2
    def enc(scale):
        w = Tensor(np.eye(3) * scale, requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        return EncoderParams(layers=[(w, b)])

    head = PrototypeHead(prototypes=Tensor(np.eye(3)))
    m = ModelState(encoder=enc(1.0), head=head)
    m.snapshot = ModelState(encoder=enc(0.0), head=head.copy())
    x = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    # (1 + 2) / 2
    assert abs(ldifs_loss(m, x).item() - 1.5) < 1e-12


def test_lipsum_aligned_probe_oracle():
    # single probe exactly along the feature displacement: |delta|^2 / 2
    m = snap_model()
    m.encoder.layers[-1][1].data += np.array([0.3, 0.0, 0.0, 0.0])
    x = np.zeros((2, 6))  # relu kills negatives; displacement is the bias delta
    from funcreg.regularizers import _lipsum_with_probes
    probe = np.array([[1.0, 0.0, 0.0, 0.0]])
    got = _lipsum_with_probes(m, x, probe).item()
    assert abs(got - 0.3 ** 2 / 2.0) < 1e-12


def test_lipsum_many_probes_approach_isotropic_limit():
    m = snap_model(seed=3)
    for w, b in m.encoder.layers:
        w.data += 0.05
    x = batch(1)
    live = m.forward_features(Tensor(x)).data
    ref = m.snapshot.forward_features(Tensor(x)).data
    limit = float(np.mean(np.sum((live - ref) ** 2, axis=1))) / (2.0 * 4)
    got = lipsum_loss(m, x, n_probes=10000, step_seed=0).item()
    assert abs(got - limit) / limit < 0.05


def test_lipsum_probes_are_keyed_by_step():
    m = snap_model(seed=4)
    m.encoder.layers[0][0].data += 0.1
    x = batch(2)
    a = lipsum_loss(m, x, 4, step_seed=1).item()
    b = lipsum_loss(m, x, 4, step_seed=1).item()
    c = lipsum_loss(m, x, 4, step_seed=2).item()
    assert a == b and a != c
    with pytest.raises(ConfigError):
        lipsum_loss(m, x, 0, step_seed=0)


def test_car_context_is_run_seeded_and_unit_norm():
    ctx = sample_context_prototypes(16, 8, seed=5)
    assert ctx.shape == (16, 8)
    assert np.allclose(np.linalg.norm(ctx, axis=1), 1.0, atol=1e-12)
    assert np.array_equal(ctx, sample_context_prototypes(16, 8, seed=5))
    assert not np.array_equal(ctx, sample_context_prototypes(16, 8, seed=6))


def test_car_rejects_wrong_context_shape():
    m = snap_model()
    with pytest.raises(ConfigError):
        car_loss(m, batch(), np.zeros((4, 9)))


def test_far_needs_snapshot_and_valid_space():
    m = build_model(6, (5,), 4, 3, seed=0)
    with pytest.raises(StateError):
        far_loss(m, batch())
    m.take_snapshot()
    with pytest.raises(ConfigError):
        far_loss(m, batch(), output_space="peanuts")


def test_far_logit_space_multiple_of_probability_space_ordering():
    m = snap_model(seed=6)
    m.encoder.layers[0][0].data += 0.2
    x = batch(3)
    p = far_loss(m, x, "probabilities").item()
    z = far_loss(m, x, "logits").item()
    assert p > 0.0 and z > 0.0


def test_regularizer_grads_flow_to_parameters():
    # every term that should touch the encoder produces a nonzero grad there
    x = batch(4)
    for name in ("far", "fcr", "l2sp", "ldifs", "car", "lipsum", "ema"):
        m = snap_model(seed=7)
        m.ema_init()
        for w, b in m.encoder.layers:
            w.data *= 1.05
        m.ema_update(0.5)  # make teacher differ from live
        ctx = sample_context_prototypes(5, 4, seed=1)
        with GradientTape() as tape:
            if name == "far":
                loss = far_loss(m, x)
            elif name == "fcr":
                loss = fcr_loss(m, x, x + 0.3)
            elif name == "l2sp":
                loss = l2sp_loss(m)
            elif name == "ldifs":
                loss = ldifs_loss(m, x)
            elif name == "car":
                loss = car_loss(m, x, ctx)
            elif name == "lipsum":
                loss = lipsum_loss(m, x, 6, step_seed=0)
            else:
                loss = ema_distill_loss(m, x)
        assert loss.item() > 0.0, name
        backward(loss, tape)
        g = m.encoder.layers[0][0].grad
        assert g is not None and np.linalg.norm(g) > 0.0, name
        # snapshot and teacher stay gradient-free
        assert m.snapshot.encoder.layers[0][0].grad is None
        assert m.ema.encoder.layers[0][0].grad is None


def test_combined_loss_parts_and_skipping():
    m = snap_model(seed=8)
    x = batch(5)
    y = np.array([0, 1, 2, 0, 1])

    plain = RegularizerConfig(method="none")
    total, parts = combined_loss(m, x, y, None, plain)
    assert set(parts) == {"ce"}

    both = RegularizerConfig(method="far_fcr")
    total_b, parts_b = combined_loss(m, x, y, x + 0.2, both)
    assert set(parts_b) == {"ce", "far", "fcr"}
    assert abs(total_b.item() - (parts_b["ce"] + parts_b["far"] + parts_b["fcr"])) < 1e-12

    # zero weights degrade to plain tuning, bit for bit
    degenerate = RegularizerConfig(method="far_fcr", lambda1=0.0, lambda2=0.0)
    with pytest.warns(UserWarning):
        total_d, parts_d = combined_loss(m, x, y, x + 0.2, degenerate)
    assert set(parts_d) == {"ce"}
    assert total_d.item() == total.item()


def test_combined_loss_missing_pieces_raise():
    m = snap_model()
    x = batch()
    y = np.zeros(5, dtype=int)
    with pytest.raises(StateError):
        combined_loss(m, x, y, None, RegularizerConfig(method="far"))
    with pytest.raises(StateError):
        combined_loss(m, x, y, None, RegularizerConfig(method="car"))


def test_combined_loss_scales_terms():
    m = snap_model(seed=9)
    for w, _ in m.encoder.layers:
        w.data *= 1.1
    x = batch(6, n=6)
    y = np.array([0, 1, 2, 0, 1, 2])
    cfg1 = RegularizerConfig(method="l2sp", lambda_base=1.0)
    cfg5 = RegularizerConfig(method="l2sp", lambda_base=5.0)
    t1, p1 = combined_loss(m, x, y, None, cfg1)
    t5, p5 = combined_loss(m, x, y, None, cfg5)
    assert p1["reg"] == p5["reg"]
    assert abs((t5.item() - p5["ce"]) - 5.0 * (t1.item() - p1["ce"])) < 1e-12


def test_config_validation_and_methods_list():
    assert set(METHODS) == {"none", "far", "fcr", "far_fcr", "l2sp", "ldifs",
                            "car", "lipsum", "ema_distill"}
    with pytest.raises(ConfigError):
        RegularizerConfig(method="flug")
    with pytest.raises(ConfigError):
        RegularizerConfig(lambda1=-0.5)
    with pytest.raises(ConfigError):
        RegularizerConfig(output_space="spectral")
    with pytest.raises(ConfigError):
        RegularizerConfig(ema_decay=2.0)
    with pytest.raises(ConfigError):
        RegularizerConfig(lipsum_probes=0)
