import numpy as np
import pytest

from src.faults.injector import FaultConfig, FaultLabel
from src.nn.network import param_hash
from src.nn.rng import make_rng
from src.pipeline.evaluation import branch_features, evaluate, topology_experiment
from src.pipeline.losses import LossWeights, reg_loss
from src.pipeline.model import (
    ArchConfig,
    ComputeBlock,
    DetectorHead,
    build_autoencoder,
    build_compute_block,
    build_detector,
    correct,
    correct_batch,
    decode,
    detect,
    detector_features,
    encode,
    route,
)
from src.pipeline.optim import ClipConfig
from src.pipeline.training import (
    Stage2Options,
    pretrain_ae,
    reconstruction_mse,
    stage2_step,
    train_stage2,
)
from src.synthdata.scene import generate, stack

TINY = ArchConfig(image_size=8, sensor_dims=8, z_image=4, z_sensor=4, image_channels=(2,),
                  sensor_channels=(2,), decoder_channels=2, compute_layers=2, detector_hidden=8)
FAST = dict(batch=8, lipschitz_pairs=100, probes=2, probe_samples=16)


@pytest.fixture(scope="module")
def data():
    return generate(24, seed=0, image_size=8, chunk=12)


@pytest.fixture
def frozen_ae(data):
    ae = build_autoencoder(TINY, seed=1)
    images, sensors = stack(data)
    pretrain_ae(ae, images, sensors, epochs=2, batch=8, eta=1e-2, seed=1, verbose=False)
    ae.freeze()
    return ae


def _stage2(ae, data, epochs=2, **kw):
    compute = build_compute_block(TINY, seed=2)
    detector = build_detector(TINY, seed=2)
    opts = Stage2Options(epochs=epochs, seed=2, **{**FAST, **kw})
    return train_stage2(ae, compute, detector, data, FaultConfig(rng_seed=2), LossWeights(),
                        ClipConfig(eta=1e-3), opts, verbose=False)


def test_pretraining_reduces_reconstruction_error(data):
    ae = build_autoencoder(TINY, seed=3)
    images, sensors = stack(data)
    before = reconstruction_mse(ae, images, sensors)["total"]
    _, curve = pretrain_ae(ae, images, sensors, epochs=15, batch=8, eta=1e-2, seed=3, verbose=False)
    after = reconstruction_mse(ae, images, sensors)
    assert len(curve) == 15
    assert after["total"] < before
    assert after["total"] == pytest.approx(after["image"] + after["sensor"])


def test_zero_epochs_leaves_the_autoencoder_unchanged(data):
    ae = build_autoencoder(TINY, seed=3)
    h = ae.param_hash()
    _, curve = pretrain_ae(ae, *stack(data), epochs=0, verbose=False)
    assert curve == [] and ae.param_hash() == h


def test_pretrain_rejects_a_frozen_autoencoder(frozen_ae, data):
    with pytest.raises(ValueError):
        pretrain_ae(frozen_ae, *stack(data), epochs=1, verbose=False)


def test_stage2_requires_a_frozen_untouched_autoencoder(data):
    ae = build_autoencoder(TINY, seed=4)
    with pytest.raises(ValueError, match="frozen"):
        _stage2(ae, data)
    ae.freeze()
    ae.decoders["image"].params[0]["b"] += 1.0
    with pytest.raises(RuntimeError):
        _stage2(ae, data)


def test_stage2_zero_epochs_has_empty_log(frozen_ae, data):
    assert _stage2(frozen_ae, data, epochs=0).log == []


def test_stage2_trains_heads_and_keeps_the_autoencoder_frozen(frozen_ae, data):
    before = frozen_ae.param_hash()
    compute0 = param_hash(build_compute_block(TINY, seed=2).net)
    result = _stage2(frozen_ae, data)
    assert frozen_ae.param_hash() == before == frozen_ae.frozen_hash
    assert param_hash(result.compute.net) != compute0
    assert [e["epoch"] for e in result.log] == [0, 1]
    for entry in result.log:
        for key in ("L_rec", "L_sim", "L_con", "L_reg", "detector_ce", "grad_scale_mean",
                    "lipschitz_compute", "lipschitz_detector", "reg_encoder"):
            assert np.isfinite(entry[key])
        assert 0.0 < entry["grad_scale_mean"] <= 1.0


def test_stage2_without_regularizer_logs_zero_reg(frozen_ae, data):
    result = _stage2(frozen_ae, data, epochs=1, regularize=False)
    assert result.log[0]["L_reg"] == 0.0
    assert result.log[0]["reg_compute"] == 0.0
    assert result.log[0]["grad_scale_mean"] == 1.0


def test_stage2_resume_matches_uninterrupted_run(frozen_ae, data):
    straight = _stage2(frozen_ae, data, epochs=2)

    compute = build_compute_block(TINY, seed=2)
    detector = build_detector(TINY, seed=2)
    first = train_stage2(frozen_ae, compute, detector, data, FaultConfig(rng_seed=2), LossWeights(),
                         ClipConfig(eta=1e-3), Stage2Options(epochs=1, seed=2, **FAST), verbose=False)
    resumed = train_stage2(frozen_ae, ComputeBlock(compute.net.copy()), DetectorHead(detector.net.copy()),
                           data, FaultConfig(rng_seed=2), LossWeights(), ClipConfig(eta=1e-3),
                           Stage2Options(epochs=2, seed=2, **FAST), start_epoch=1,
                           opt_state=first.optimizer_state, verbose=False)
    assert param_hash(resumed.compute.net) == param_hash(straight.compute.net)
    assert param_hash(resumed.detector.net) == param_hash(straight.detector.net)
    assert resumed.log[0] == straight.log[1]


def test_stage2_step_terms_on_identity_compute(frozen_ae, data):
    images, sensors = stack(data[:4])
    z = encode(frozen_ae, images, sensors)
    compute = build_compute_block(TINY)
    detector = build_detector(TINY)
    labels = np.array([0, 0, 0, 0])
    terms, grads = stage2_step(frozen_ae, compute, detector, z, z.copy(),
                               {"image": images, "sensor": sensors}, labels, LossWeights(),
                               Stage2Options(**FAST), make_rng(0))
    assert terms["L_sim"] == 0.0
    assert terms["L_con"] == 0.0
    assert terms["reg_compute"] == pytest.approx(TINY.z)
    assert set(grads) >= {"compute.0.W", "detector.2.b"}


def test_stage2_step_regulariser_is_reg_loss(frozen_ae, data):
    images, sensors = stack(data[:4])
    z = encode(frozen_ae, images, sensors)
    compute = build_compute_block(TINY, seed=5)
    detector = build_detector(TINY)
    weights = LossWeights(lambda_reg_compute=0.5)
    targets = {"image": images, "sensor": sensors}
    labels = np.zeros(4, dtype=np.int64)
    on, g_on = stage2_step(frozen_ae, compute, detector, z, z.copy(), targets, labels, weights,
                           Stage2Options(**FAST), make_rng(7))
    off, g_off = stage2_step(frozen_ae, compute, detector, z, z.copy(), targets, labels, weights,
                             Stage2Options(**{**FAST, "regularize": False}), make_rng(7))
    reg = reg_loss({}, compute.net, {}, {}, z, weights, FAST["probes"], make_rng(7), grad=True)
    assert on["reg_compute"] == pytest.approx(reg.compute)
    assert off["reg_compute"] == 0.0
    for i, p in enumerate(reg.compute_grads):
        for k, g in p.items():
            path = f"compute.{i}.{k}"
            np.testing.assert_allclose(g_on[path] - g_off[path], g, atol=1e-12)


def test_identity_compute_correction_equals_plain_autoencoder(frozen_ae, data):
    compute = build_compute_block(TINY)
    s = data[5]
    out = correct(frozen_ae, compute, s)
    images, sensors = decode(frozen_ae, encode(frozen_ae, s.image[None], s.sensor[None]))
    np.testing.assert_array_equal(out.image, images[0])
    np.testing.assert_array_equal(out.sensor, sensors[0])
    np.testing.assert_array_equal(out.pair.z_c, out.pair.z_f)


def test_batch_correction_matches_single_samples(frozen_ae, data):
    compute = build_compute_block(TINY, seed=7, init="xavier")
    images, sensors = stack(data[:5])
    batch = correct_batch(frozen_ae, compute, images, sensors)
    for i in range(5):
        single = correct(frozen_ae, compute, (images[i], sensors[i]))
        np.testing.assert_array_equal(batch.image[i], single.image)
        np.testing.assert_array_equal(batch.sensor[i], single.sensor)


def _zero_detector():
    det = build_detector(TINY)
    for p in det.net.params:
        for a in p.values():
            a[:] = 0.0
    return det


def test_uniform_detector_scores_and_tie_break():
    det = _zero_detector()
    label, scores = detect(det, np.ones(TINY.z))
    np.testing.assert_allclose(scores, [1 / 3] * 3)
    assert label == FaultLabel.CLEAN
    labels, batch_scores = detect(det, np.ones((4, TINY.z)))
    np.testing.assert_array_equal(labels, [0, 0, 0, 0])
    assert batch_scores.shape == (4, 3)


def test_route_bypasses_correction_for_clean_predictions(frozen_ae, data):
    compute = build_compute_block(TINY, seed=7, init="xavier")
    det = _zero_detector()
    s = data[2]
    label, result, _ = route(frozen_ae, compute, det, s)
    assert label == FaultLabel.CLEAN
    images, _ = decode(frozen_ae, encode(frozen_ae, s.image[None], s.sensor[None]))
    np.testing.assert_array_equal(result.image, images[0])

    det.net.params[-1]["b"][:] = [0.0, 0.0, 5.0]
    label, result, scores = route(frozen_ae, compute, det, s)
    assert label == FaultLabel.CAMERA_FAULT
    np.testing.assert_array_equal(result.image, correct(frozen_ae, compute, s).image)


def test_detector_input_space(frozen_ae):
    compute = build_compute_block(TINY, seed=7, init="xavier")
    z = np.ones((2, TINY.z))
    assert build_detector(TINY).input_space == "pre_compute"
    assert detector_features(build_detector(TINY), compute, z) is z
    post = build_detector(TINY, input_space="post_compute")
    assert not np.array_equal(detector_features(post, compute, z), z)
    with pytest.raises(ValueError):
        build_detector(TINY, input_space="raw")


def test_branch_features_read_linear_outputs(frozen_ae, data):
    images, sensors = stack(data[:3])
    feats, split = branch_features(frozen_ae, images, sensors)
    conv_out = frozen_ae.encoders["image"].layers[0].out_dims
    assert len(split["conv"]) == int(np.prod(conv_out))
    assert len(split["dense"]) == TINY.z_sensor
    assert feats.shape == (3, len(split["conv"]) + len(split["dense"]))
    # pre-activation: the ReLU has not clipped the conv features
    assert np.any(feats[:, split["conv"]] < 0)
    with pytest.raises(ValueError):
        branch_features(frozen_ae, images, sensors, conv_layer=3)


def test_block_faults_stay_local_in_conv_features(frozen_ae, data):
    profiles = topology_experiment(frozen_ae, data, FaultConfig(intensity=0.25), seed=1)
    assert set(profiles) == {"conv", "conv_global", "dense"}
    for p in profiles.values():
        assert 0.0 <= p.sparsity <= 1.0
    # same input energy spread over the whole image reaches every conv unit
    assert profiles["conv"].sparsity > profiles["conv_global"].sparsity
    assert profiles["conv"].sparsity > profiles["dense"].sparsity


def test_evaluate_reports_every_section(frozen_ae, data):
    result = _stage2(frozen_ae, data, epochs=1)
    test = generate(18, seed=9, image_size=8)
    report = evaluate(frozen_ae, result.compute, result.detector, test, FaultConfig(rng_seed=4),
                      lipschitz_pairs=100, train=data)
    assert report.confusion.total == 18
    assert set(report.reconstruction["source"]) == {"corrupted", "autoencoder", "corrected"}
    summary = report.summary()
    for key in ("macro_precision", "macro_recall", "macro_f1", "utility", "similarity", "margin",
                "lipschitz_compute", "lipschitz_detector", "topology", "probe_r2"):
        assert key in summary
    assert 0.0 <= summary["utility"]["overall"] <= 1.0
    assert set(summary["topology"]) == {"conv", "conv_global", "dense"}
    assert report.latents["z_clean"].shape == (18, TINY.z)
