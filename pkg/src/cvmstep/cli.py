"""Command-line entry point: run one experiment scenario and write its artifacts."""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import SCENARIOS, ConfigError, ExperimentConfig, reference_config

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class ScenarioFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cvmstep", description="Single-stepping attack simulator experiments.")
    p.add_argument("--config", help="JSON file with flat dotted keys")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--threads", type=int, help="key-search threads (overrides run.threads)")
    p.add_argument("--scenario", help=f"one of: {', '.join(SCENARIOS)}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; VALUE is parsed as JSON when possible")
    p.add_argument("--reference-config", action="store_true", help="print every key with its default and exit")
    return p


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _nop_stepper_factory(cfg: ExperimentConfig, knobs, rng: np.random.Generator, n: int):
    from .guest import GuestVM
    from .latency import slide_program
    from .stepper import Stepper
    from .guest import identity_pages

    timing = cfg.section("timing")

    def factory():
        program, _ = slide_program("nop", n)
        pages = identity_pages(sorted({a >> 12 for a in program.code_layout}))
        return Stepper(GuestVM(program, pages, timing), rng, knobs)

    return factory


# scenarios ---------------------------------------------------------------

def scenario_calibrate(cfg: ExperimentConfig, rng, out: Path) -> dict:
    from .stepper import calibrate_timer

    base = cfg.section("stepper")
    variants = {
        "baseline": base.replace(flush_tlb=False, reset_a_bit=False),
        "a-bit-reset": base.replace(flush_tlb=False, reset_a_bit=True),
        "flush-tlb": base.replace(flush_tlb=True, reset_a_bit=False),
    }
    rows, chosen, reliable = [], {}, {}
    for name, knobs in variants.items():
        factory = _nop_stepper_factory(cfg, knobs, rng, cfg["calibrate.slide_length"])
        timer, table = calibrate_timer(factory, knobs)
        chosen[name] = timer
        # reliable: the chosen timer never retired more than one instruction per step
        reliable[name] = next(r["multi"] == 0 for r in table if r["timer"] == timer)
        rows += [{"config": name, **r} for r in table]
    with open(out / "calibration.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["config", "timer", "zero", "single", "multi", "mean-multi"])
        w.writeheader()
        w.writerows(rows)
    result = {"chosen_timer": chosen, "reliable": reliable}
    _write_json(out / "calibration.json", result)
    return result


def scenario_step_bench(cfg: ExperimentConfig, rng, out: Path) -> dict:
    from .latency import LatencyBench, summarize, write_samples_csv

    bench = LatencyBench(rng, cfg.section("stepper"), cfg.section("timing"))
    bench.calibrate(cfg["calibrate.slide_length"])
    res = bench.run_slide("nop", cfg["step_bench.slide_length"], 1)
    zero = bench.zero_step_latencies(cfg["step_bench.zero_steps"])
    write_samples_csv(out / "step_bench.csv", [res])
    result = {"timer": bench.timer, "counts": res.counts()}
    if res.samples:
        s = summarize(res.samples)
        result["single_latency"] = {"median": s.median, "q1": s.q1, "q3": s.q3}
    zs = summarize(zero)
    result["zero_latency"] = {"median": zs.median, "q1": zs.q1, "q3": zs.q3}
    _write_json(out / "step_bench.json", result)
    return result


def scenario_pf_trace(cfg: ExperimentConfig, rng, out: Path) -> dict:
    from .crypto.xts import XtsCipher
    from .fixture import make_fixture
    from .guest import GuestVM
    from .pftrack import match_fingerprint, run_fingerprint_capture
    from .victim import XTS_FINGERPRINT, KernelLayout, XtsRequest, compile_xts_requests, control_workload

    n = cfg["pf_trace.requests"]
    fx = make_fixture(int(rng.integers(1 << 31)), n, 0)
    layout = KernelLayout.random(rng)
    reqs = [XtsRequest(s.sector, s.ciphertext[:16]) for s in fx.sectors]
    vp = compile_xts_requests(reqs, XtsCipher(fx.key), layout, rng=rng, interlude=2)
    log = run_fingerprint_capture(GuestVM(vp.program, layout.page_entries()), layout.text_base)
    ctrl_prog = control_workload(layout, rng, cfg["pf_trace.control_segments"])
    ctrl_log = run_fingerprint_capture(GuestVM(ctrl_prog, layout.page_entries()), layout.text_base)
    (out / "pf_trace.txt").write_text("".join(f"{o:#x}\n" for o in log))
    result = {
        "requests": n,
        "faults": len(log),
        "matches": len(match_fingerprint(log, XTS_FINGERPRINT)),
        "control_faults": len(ctrl_log),
        "control_matches": len(match_fingerprint(ctrl_log, XTS_FINGERPRINT)),
    }
    _write_json(out / "pf_trace.json", result)
    if result["matches"] != n or result["control_matches"]:
        raise ScenarioFailed(f"fingerprint matched {result['matches']}/{n} requests, "
                             f"{result['control_matches']} control matches")
    return result


def scenario_train_classifier(cfg: ExperimentConfig, rng, out: Path) -> dict:
    from .attack import collect_cipher_traces
    from .classifier import accuracy, build_dataset, split_by_op, train

    direction = cfg["train.direction"]
    traces, _, _ = collect_cipher_traces(cfg["train.ops"], rng, direction, cfg.section("stepper"),
                                         cfg.section("noise"), geometry=cfg.section("cache"),
                                         timing=cfg.section("timing"))
    tcfg = cfg.section("classifier")
    tables = {}
    for name, ct in traces.items():
        ds = build_dataset(ct.hot, ct.labels)
        tr, te = split_by_op(ds, cfg["train.test_fraction"], rng)
        model, report = train(tr.x, tr.y, tcfg)
        with open(out / f"model_{name}.bin", "wb") as fh:
            model.save(fh)
        tables[name] = {"train": int(len(tr.y)), "test": int(len(te.y)),
                        "accuracy": round(accuracy(model, te.x, te.y), 6),
                        "final_loss": round(report.train_loss[-1], 6) if report.train_loss else None}
    result = {"direction": direction, "tables": tables}
    _write_json(out / "train.json", result)
    return result


def scenario_attack_aes(cfg: ExperimentConfig, rng, out: Path) -> dict:
    from .fixture import DiskFixture, make_fixture
    from .pipeline import run_xts_attack

    if cfg["fixture.path"]:
        fx = DiskFixture.load(cfg["fixture.path"])
    else:
        fx = make_fixture(cfg["run.seed"], cfg["fixture.sectors"], cfg["fixture.known"])
    fx.save(out / "fixture.json")
    search = cfg.section("search")
    search.threads = cfg["run.threads"]
    rep = run_xts_attack(fx, rng, cfg.section("noise"), cfg.section("stepper"), cfg["attack.profile_ops"],
                         cfg.section("classifier"), search, cfg["attack.mass"], cfg["attack.interlude"],
                         geometry=cfg.section("cache"), timing=cfg.section("timing"),
                         all_payload_ops=cfg["attack.all_payload_ops"])
    summary = rep.summary()
    print(json.dumps({"timings": summary.pop("timings")}), file=sys.stderr)
    summary["fixture_match"] = (rep.success and rep.keys.tweak_key == fx.tweak_key
                                and rep.keys.data_key == fx.data_key)
    _write_json(out / "attack.json", summary)
    if not summary["fixture_match"]:
        raise ScenarioFailed(summary["error"] or "recovered keys differ from the fixture")
    return {"tweak_key": summary["tweak_key"], "data_key": summary["data_key"], "fixture_match": True}


def scenario_nemesis(cfg: ExperimentConfig, rng, out: Path) -> dict:
    from .latency import (
        LatencyBench,
        classify_instruction,
        div_operand_experiment,
        summarize,
        write_samples_csv,
    )

    bench = LatencyBench(rng, cfg.section("stepper"), cfg.section("timing"))
    bench.calibrate(cfg["calibrate.slide_length"])
    slides = {c: bench.run_slide(c, cfg["nemesis.slide_length"], cfg["nemesis.reps"])
              for c in cfg["nemesis.classes"]}
    divs = div_operand_experiment(bench, n=cfg["nemesis.div_slide_length"], reps=cfg["nemesis.div_reps"])
    write_samples_csv(out / "nemesis_samples.csv", list(slides.values()) + list(divs.values()))
    summaries = {}
    for name, res in {**slides, **divs}.items():
        entry = {"counts": res.counts()}
        if res.samples:
            s = summarize(res.samples)
            entry.update(median=s.median, q1=s.q1, q3=s.q3)
        summaries[name] = entry
    result = {"timer": bench.timer, "summaries": summaries}
    pair = [c for c in ("add", "rdrand") if c in slides and slides[c].samples]
    if len(pair) == 2:
        refs = {c: slides[c].latencies for c in pair}
        correct = 0
        for i in range(cfg["nemesis.trials"]):
            truth = pair[i % 2]
            trial = bench.run_slide(truth, cfg["nemesis.trial_samples"], 1)
            got = classify_instruction(trial.samples, refs, rng, cfg["nemesis.permutations"])
            correct += got.label == truth
        result["add_vs_rdrand_accuracy"] = correct / cfg["nemesis.trials"]
    _write_json(out / "nemesis.json", result)
    return {k: v for k, v in result.items() if k != "summaries"}


SCENARIO_FUNCS = {
    "calibrate": scenario_calibrate,
    "step-bench": scenario_step_bench,
    "pf-trace": scenario_pf_trace,
    "attack-aes": scenario_attack_aes,
    "train-classifier": scenario_train_classifier,
    "nemesis": scenario_nemesis,
}


def run(cfg: ExperimentConfig) -> dict:
    """Execute the configured scenario; returns the stdout summary."""
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    rng = np.random.default_rng(cfg["run.seed"])
    scenario = cfg["run.scenario"]
    result = SCENARIO_FUNCS[scenario](cfg, rng, out)
    return {"scenario": scenario, "status": "ok", "out": str(out),
            "artifacts": sorted(p.name for p in out.iterdir()), "result": result}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.reference_config:
            print(json.dumps(reference_config(), indent=2, sort_keys=True))
            return EXIT_OK
        overrides = _parse_set(args.set)
        for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("threads", "run.threads"),
                          ("scenario", "run.scenario")):
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
        cfg = (ExperimentConfig.load(args.config, overrides) if args.config
               else ExperimentConfig.from_mapping(overrides))
    except (UsageError, ConfigError) as exc:
        print(f"cvmstep: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    started = time.perf_counter()
    try:
        summary = run(cfg)
    except Exception as exc:  # scenario failures map to one exit status
        print(json.dumps({"scenario": cfg["run.scenario"], "status": "failed", "error": str(exc)}))
        print(f"cvmstep: {cfg['run.scenario']} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(summary, sort_keys=True))
    print(f"cvmstep: {cfg['run.scenario']} finished in {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
