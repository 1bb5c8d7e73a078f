import json

import numpy as np
import pytest

from cvmstep.guest import DEFAULT_LATENCY, DIV_DIVISOR, Op, div_latency, quotient_bits
from cvmstep.latency import (
    DIV_PROFILES,
    CalibrationMissing,
    LatencyBench,
    LatencySample,
    SlideResult,
    classify_instruction,
    div_operand_experiment,
    expected_div_extra,
    profile_dividend,
    summarize,
    summary_json,
    write_samples_csv,
)
from cvmstep.stepper import StepperKnobs


@pytest.fixture(scope="module")
def bench():
    b = LatencyBench(np.random.default_rng(0))
    b.calibrate()
    return b


@pytest.fixture(scope="module")
def exact_bench():
    b = LatencyBench(np.random.default_rng(1), StepperKnobs(entry_stddev=0.0))
    b.calibrate(400)
    return b


def test_measuring_needs_calibration():
    with pytest.raises(CalibrationMissing):
        LatencyBench(np.random.default_rng(0)).run_slide("nop", 10, 1)


def test_only_single_steps_enter_distributions(bench):
    res = bench.run_slide("nop", 200, 2)
    assert res.counts()["single"] == 400
    assert all(s.step_size == 1 for s in res.samples)
    assert len(res.latencies) == len(res.samples) < len(res.raw)


def test_nop_slide_is_unimodal(bench):
    s = summarize(bench.run_slide("nop", 300, 2).samples, bins=16)
    assert s.modes() == 1 and s.iqr < 100


def test_add_and_rdrand_supports_are_disjoint(bench):
    add = bench.run_slide("add", 200, 2).latencies
    rd = bench.run_slide("rdrand", 200, 2).latencies
    assert add.max() < rd.min()


def test_forced_zero_steps_give_empty_distribution_and_warning(bench):
    b = LatencyBench(np.random.default_rng(2), timer=1)
    with pytest.warns(RuntimeWarning):
        res = b.run_slide("nop", 5, 1)
    assert res.samples == [] and res.counts()["zero"] > 0


@pytest.mark.parametrize("cls", ["nop", "lar", "rdrand"])
def test_overhead_subtraction_recovers_base_latency(bench, cls):
    zero = bench.zero_step_latencies(300)
    res = bench.run_slide(cls, 200, 2)
    est = bench.estimate_base_latency(res, zero)
    assert abs(est - DEFAULT_LATENCY[Op(cls)]) <= 2 * res.latencies.std()


def test_summarize_examples():
    s = summarize([5] * 10)
    assert s.iqr == 0 and s.median == 5
    rng = np.random.default_rng(3)
    x = rng.normal(100, 10, 4000)
    assert abs(summarize(x).median - 100) < 3 * 1.2533 * 10 / np.sqrt(4000)
    mix = np.concatenate([rng.normal(100, 2, 500), rng.normal(300, 2, 500)])
    assert summarize(mix, bins=32).modes() == 2
    with pytest.raises(ValueError):
        summarize([])


def test_classify_from_reference_class():
    rng = np.random.default_rng(4)
    refs = {"add": rng.normal(2700, 35, 500), "rdrand": rng.normal(3900, 35, 500)}
    got = classify_instruction(rng.normal(3900, 35, 50), refs, rng)
    assert got.label == "rdrand" and got.confidence > 0.99 and not got.tie


def test_classify_tie_and_single_sample():
    rng = np.random.default_rng(5)
    got = classify_instruction([150.0], {"a": [100.0], "b": [200.0]}, rng)
    assert got.tie and got.confidence == 0.0
    one = classify_instruction([2710.0], {"add": rng.normal(2700, 35, 200), "mul": rng.normal(2750, 35, 200)}, rng)
    assert one.label == "add" and one.confidence < 0.9
    with pytest.raises(ValueError):
        classify_instruction([], {"a": [1.0]}, rng)


def test_div_rule():
    rng = np.random.default_rng(6)
    for bits in (0, 1, 9, 10, 16, 40, 63, 64):
        d = profile_dividend(bits, rng)
        assert quotient_bits(d) == bits
        assert div_latency(d) == 8 + expected_div_extra(bits)
    assert expected_div_extra(64) == 8
    assert div_latency(DIV_DIVISOR - 1) == 8


def test_div_medians_increase_and_64_bit_adds_8(exact_bench):
    res = div_operand_experiment(exact_bench, n=100, reps=2)
    med = {k: float(np.median(v.latencies)) for k, v in res.items()}
    assert med["div64-1"] < med["div64-2"] < med["div64-3"]
    assert med["div64-3"] - med["div64-0"] == expected_div_extra(DIV_PROFILES["div64-3"]) == 8


def test_outputs(tmp_path):
    res = SlideResult("add", [LatencySample("add", None, 10, 1), LatencySample("add", None, 12, 0),
                              LatencySample("add", 7, 11, 1)])
    path = tmp_path / "s.csv"
    write_samples_csv(path, [res])
    lines = path.read_text().splitlines()
    assert lines[0] == "class,operand,latency,step-size" and lines[3] == "add,0x7,11,1"
    out = json.loads(summary_json({"add": res, "none": SlideResult("nop")}))
    assert out["add"]["median"] == 10.5 and out["add"]["counts"]["zero"] == 1
    assert "median" not in out["none"]
