import numpy as np
import pytest
from dotenv import dotenv_values

from src.config import Baseline, MaskMode, ModelConfig, PSNR_CAP_DB, ProtocolError, SegInput, SegMode
from src.evaluation import (
    MetricsReport,
    ModelCompleter,
    OracleCompleter,
    ProtocolSpec,
    Segmenter,
    fill_missing,
    make_completer,
    run_protocol_random_k,
    run_protocol_single_missing,
)
from src.remic_model import ReMIC

TINY3 = dict(num_domains=3, image_size=16, content_channels=8, num_res_blocks=1, style_dim=4, mlp_dim=16,
             disc_channels=4, disc_layers=3, disc_scales=1)


@pytest.fixture
def model3():
    return ReMIC(ModelConfig(**TINY3))


def test_oracle_scores_perfectly(synth3_dataset):
    for missing in range(3):
        report = run_protocol_single_missing(OracleCompleter(), synth3_dataset.test, missing)
        assert report.domains == [missing]
        assert report.nrmse[missing] == 0.0
        assert report.ssim[missing] == pytest.approx(1.0, abs=1e-9)
        assert report.psnr[missing] == PSNR_CAP_DB
        assert report.sample_count == 4


def test_zero_baseline_nrmse_is_one(synth3_dataset):
    report = run_protocol_single_missing(make_completer(Baseline.ZERO), synth3_dataset.test, 0)
    assert report.nrmse[0] == pytest.approx(1.0, abs=1e-12)
    assert report.method == "zero"
    assert report.protocol == "single-missing:0"


def test_single_missing_rejects_bad_domain(synth3_dataset):
    with pytest.raises(ProtocolError, match="out of range"):
        run_protocol_single_missing(OracleCompleter(), synth3_dataset.test, 3)


@pytest.mark.parametrize("k", [0, 3])
def test_random_k_rejects_bad_k(synth3_dataset, k):
    with pytest.raises(ProtocolError, match="k must be"):
        run_protocol_random_k(OracleCompleter(), synth3_dataset.test, k)


def test_random_k_is_seeded(synth3_dataset, model3):
    completer = ModelCompleter(model3)
    a = run_protocol_random_k(completer, synth3_dataset.test, 1, seed=4)
    b = run_protocol_random_k(completer, synth3_dataset.test, 1, seed=4)
    assert a == b
    assert a.domains == [0, 1, 2]


@pytest.mark.parametrize("make", [lambda m: make_completer(Baseline.AVERAGE), lambda m: ModelCompleter(m)])
def test_exhaustive_random_k_equals_single_missing_mean(synth3_dataset, model3, make):
    completer = make(model3)
    combined = run_protocol_random_k(completer, synth3_dataset.test, 2, scope="missing", exhaustive=True)
    singles = [run_protocol_single_missing(completer, synth3_dataset.test, i) for i in range(3)]
    for metric in ("mae", "nrmse", "psnr", "ssim"):
        for i, single in enumerate(singles):
            assert getattr(combined, metric)[i] == pytest.approx(getattr(single, metric)[i], abs=1e-9)
        assert combined.mean(metric) == pytest.approx(np.mean([getattr(s, metric)[i] for i, s in enumerate(singles)]),
                                                      abs=1e-9)


def test_scope_all_scores_visible_domains_too(synth3_dataset):
    report = run_protocol_random_k(make_completer(Baseline.ZERO), synth3_dataset.test, 2, scope="all", exhaustive=True)
    # Two of the three subsets leave each domain visible, where zero filling is exact.
    assert report.nrmse[0] == pytest.approx(1.0 / 3.0, abs=1e-12)
    with pytest.raises(ProtocolError, match="scope"):
        run_protocol_random_k(OracleCompleter(), synth3_dataset.test, 1, scope="visible")


def test_nn_baseline_needs_training_set(synth3_dataset):
    report = run_protocol_single_missing(make_completer(Baseline.NN, synth3_dataset.train), synth3_dataset.test, 1)
    assert report.nrmse[1] > 0.0
    with pytest.raises(Exception, match="non-empty"):
        make_completer(Baseline.NN, [])


def test_fill_missing(synth3_dataset):
    sample = synth3_dataset.test[0].with_visibility([True, False, True])
    filled = fill_missing(sample, np.zeros_like(sample.images))
    assert np.array_equal(filled[0], sample.images[0])
    assert not filled[1].any()


def test_segmentation_scores(synth3_dataset):
    model = ReMIC(ModelConfig(**TINY3, seg_mode=SegMode.JOINT))
    segmenter = Segmenter(model)
    report = run_protocol_single_missing(OracleCompleter(), synth3_dataset.test, 2, segmenter=segmenter)
    assert len(report.dice) == 2
    assert 0.0 <= report.dice_mean <= 1.0
    assert report.dice_mean == report.dice[1]


def test_zero_filled_segmentor_input_matches_zero_baseline(synth3_dataset):
    model = ReMIC(ModelConfig(**TINY3, seg_mode=SegMode.SEPARATE))
    sample = synth3_dataset.test[1].with_visibility([False, True, True])
    zero_filled = Segmenter(model, SegInput.ZERO_FILLED).predict(sample, ModelCompleter(model))
    via_baseline = Segmenter(model).predict(sample, make_completer(Baseline.ZERO))
    assert np.array_equal(zero_filled, via_baseline)


def test_segmenter_needs_segmentor(model3):
    with pytest.raises(ProtocolError, match="segmentor"):
        Segmenter(model3)


def test_report_key_value_file(tmp_path, synth3_dataset):
    model = ReMIC(ModelConfig(**TINY3, seg_mode=SegMode.JOINT))
    report = run_protocol_single_missing(ModelCompleter(model), synth3_dataset.test, 1, Segmenter(model),
                                         config={"seed": "0"})
    path = report.save(tmp_path)
    values = dotenv_values(path)
    assert values["protocol"] == "single-missing:1"
    assert values["samples"] == "4"
    assert values["domains"] == "1"
    assert {"mae.1", "nrmse.1", "psnr.1", "ssim.1", "dice.0", "dice.1", "dice.mean", "config.seed"} <= set(values)
    assert MetricsReport.load(tmp_path) == report


def test_malformed_report(tmp_path):
    (tmp_path / "report.kv").write_text("method=x\nprotocol=single-missing:0\nsamples=1\ndomains=0\n")
    with pytest.raises(ProtocolError, match="Malformed report"):
        MetricsReport.load(tmp_path)


@pytest.mark.parametrize("text, kind, value", [
    ("single-missing:2", MaskMode.SINGLE_MISSING, 2),
    ("random-k:1", MaskMode.FIXED_K, 1),
])
def test_protocol_parse(text, kind, value):
    spec = ProtocolSpec.parse(text)
    assert (spec.kind, spec.value) == (kind, value)
    assert str(spec) == text


@pytest.mark.parametrize("text", ["single-missing", "random:2", "random-k:x"])
def test_protocol_parse_rejects(text):
    with pytest.raises(ProtocolError):
        ProtocolSpec.parse(text)
