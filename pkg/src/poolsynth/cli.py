"""``poolsynth`` command-line entry point.

Every command takes one YAML/JSON config (see ``--print-schema``) and writes
its artifacts plus a ``record.json`` into the config's ``output`` directory.
Relative paths resolve under ``$POOLSYNTH_OUTPUT_ROOT`` and dataset roots
default to ``$POOLSYNTH_DATA_ROOT``.

Per-phase seeds derive from the config's single ``seed``:
``derive_seed(seed, "base")`` initializes a fresh base model,
``"pretrain"`` and ``"pool"`` drive its training, ``"prune"`` and
``"finetune"`` the post-pool variants, ``"distill"`` the synthesis run and
``"relabel"`` the soft-label augmentation. Evaluation seeds are listed
explicitly in the eval config.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime error,
3 a theory check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .data import load_synthetic, save_synthetic
from .errors import ConfigError, PoolSynthError
from .labeling_eval import EvalHP, EvalReport, cross_arch_evaluate, format_table, random_baseline, relabel
from .models import TrainHP, save_model
from .pipeline import make_base, resolve_dataset, resolve_output
from .pool import PoolManifest, PruneSpec, generate_post_pool, generate_prior_pool
from .records import ExperimentRecord, OutputCollisionError, check_output_dir, lineage, output_lock, parent_id
from .schemas import SCHEMAS, load_and_validate, schema_text
from .synthesis import SynthesisConfig, distill
from .utils import config_hash, derive_seed, set_deterministic

log = logging.getLogger("poolsynth")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _pool_inputs(path: Path) -> dict:
    return {str(path): PoolManifest.load_dir(path).checksum()}


def _synth_inputs(path: Path) -> dict:
    return {str(path): load_synthetic(path).checksum()}


def _parents(*dirs) -> list:
    return [pid for pid in (parent_id(d) for d in dirs if d is not None) if pid]


def _train_hp(block: dict, seed: int) -> TrainHP:
    return TrainHP(**{**block, "seed": seed})


def _base(cfg, ds, out: Path):
    b = cfg["base"]
    base = make_base(b["arch"], ds, cfg["seed"], path=b["path"], pretrain_epochs=b["pretrain_epochs"],
                     hp=_train_hp(cfg["train"], derive_seed(cfg["seed"], "pretrain")), **b["options"])
    path = Path(b["path"]) if b["path"] else save_model(base, out / "base.npz")
    return base, path


def cmd_pool_prior(cfg: dict, out: Path) -> ExperimentRecord:
    ds = resolve_dataset(cfg["dataset"], cfg["seed"])
    base, base_path = _base(cfg, ds, out)
    w = cfg["window"]
    pool = generate_prior_pool(base, ds, w["T_b"], w["T_e"], w["m"],
                               _train_hp(cfg["train"], derive_seed(cfg["seed"], "pool")), out,
                               unit=w["unit"], max_stage=w["max_stage"], base_path=base_path)
    inputs = {str(base_path): base.checksum()} if cfg["base"]["path"] else {}
    return ExperimentRecord("pool-prior", cfg, inputs, {"pool": {"path": str(out), "checksum": pool.checksum()}},
                            {"pool_size": len(pool), "stages": [e.stage for e in pool.entries]})


def cmd_pool_post(cfg: dict, out: Path) -> ExperimentRecord:
    ds = resolve_dataset(cfg["dataset"], cfg["seed"])
    base, base_path = _base(cfg, ds, out)
    p = cfg["prune"]
    spec = PruneSpec(p["target_flops_ratio"], p["finetune_steps"], p["finetune_unit"],
                     seed=derive_seed(cfg["seed"], "prune"))
    pool = generate_post_pool(base, ds, spec, p["count"], _train_hp(cfg["train"], derive_seed(cfg["seed"], "finetune")),
                              out, strict=cfg["strict"], base_path=base_path)
    inputs = {str(base_path): base.checksum()} if cfg["base"]["path"] else {}
    ratios = [e.flops / base.flops for e in pool.entries]
    return ExperimentRecord("pool-post", cfg, inputs, {"pool": {"path": str(out), "checksum": pool.checksum()}},
                            {"pool_size": len(pool), "flops_ratios": ratios})


def cmd_distill(cfg: dict, out: Path) -> ExperimentRecord:
    pool_dir = resolve_output(cfg["pool"])
    pool = PoolManifest.load_dir(pool_dir)
    ds = resolve_dataset(cfg["dataset"], cfg["seed"])
    scfg = SynthesisConfig(**{**cfg["synthesis"], "seed": derive_seed(cfg["seed"], "distill")})
    t0 = time.perf_counter()
    synth, history = distill(pool, ds, scfg, log_every=cfg["log_every"])
    save_synthetic(synth, out, extra={"pool_checksum": pool.checksum(), "config_hash": None,
                                      "synthesis": scfg.to_dict()}, history=history)
    return ExperimentRecord("distill", cfg, _pool_inputs(pool_dir),
                            {"synthetic": {"path": str(out), "checksum": synth.checksum()}},
                            {"loss_initial": history[0].total, "loss_final": history[-1].total,
                             "iterations": len(history), "distill_s": time.perf_counter() - t0},
                            _parents(pool_dir))


def cmd_relabel(cfg: dict, out: Path) -> ExperimentRecord:
    syn_dir, pool_dir = resolve_output(cfg["synthetic"]), resolve_output(cfg["pool"])
    synth = load_synthetic(syn_dir)
    pool = PoolManifest.load_dir(pool_dir)
    teachers = pool if cfg["members"] is None else [pool.load(i) for i in cfg["members"]]
    labeled = relabel(synth, teachers, cfg["augment"], derive_seed(cfg["seed"], "relabel"))
    save_synthetic(labeled, out, extra={"pool_checksum": pool.checksum(), "relabel_members": cfg["members"]})
    return ExperimentRecord("relabel", cfg, {**_synth_inputs(syn_dir), **_pool_inputs(pool_dir)},
                            {"synthetic": {"path": str(out), "checksum": labeled.checksum()}},
                            {"teachers": len(pool) if cfg["members"] is None else len(cfg["members"])},
                            _parents(syn_dir, pool_dir))


def cmd_eval(cfg: dict, out: Path) -> ExperimentRecord:
    syn_dir = resolve_output(cfg["synthetic"])
    synth = load_synthetic(syn_dir)
    test = resolve_dataset(cfg["test"], cfg["seed"])
    pool_dir = resolve_output(cfg["pool"]) if cfg["pool"] else None
    pool = PoolManifest.load_dir(pool_dir) if pool_dir else None
    hp = EvalHP(**cfg["hp"])
    reports = cross_arch_evaluate(synth, cfg["archs"], test, cfg["seeds"], hp, cfg["soft_label_mode"], pool)
    baseline = None
    if cfg["baseline"]:
        real = resolve_dataset(cfg["baseline"]["dataset"], cfg["seed"])
        baseline = random_baseline(real, cfg["baseline"].get("ipc", synth.ipc), cfg["archs"][0], test,
                                   cfg["seeds"], hp)
    payload = {"reports": [r.to_dict() for r in reports], "baseline": baseline.to_dict() if baseline else None}
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(format_table(reports + ([baseline] if baseline else [])))
    metrics = {r.arch_id: {"mean": r.mean, "std": r.std, "runtime_s": r.runtime_s} for r in reports}
    if baseline:
        metrics["random_baseline"] = {"mean": baseline.mean, "std": baseline.std}
    inputs = _synth_inputs(syn_dir)
    if pool_dir:
        inputs.update(_pool_inputs(pool_dir))
    accs = {r.arch_id: r.test_accuracies for r in reports}
    return ExperimentRecord("eval", cfg, inputs,
                            {"report": {"path": str(out / "report.json"), "checksum": config_hash(accs)}},
                            metrics, _parents(syn_dir, pool_dir))


COMMANDS = {"pool-prior": cmd_pool_prior, "pool-post": cmd_pool_post, "distill": cmd_distill,
            "relabel": cmd_relabel, "eval": cmd_eval}


def run_command(command: str, config_path, force: bool = False, overrides: dict | None = None,
                argv=None) -> ExperimentRecord:
    """Validate, lock the output directory, run, and write the record."""
    cfg = load_and_validate(command, config_path)
    cfg.update(overrides or {})
    out = check_output_dir(resolve_output(cfg["output"]), force)
    with output_lock(out):
        t0 = time.perf_counter()
        rec = COMMANDS[command](cfg, out)
        rec.argv = list(argv or [])
        rec.deterministic = _DETERMINISTIC[0]
        rec.runtime_s = time.perf_counter() - t0
        rec.id = rec.content_id()
        rec.write(out)
    return rec


_DETERMINISTIC = [False]


def cmd_verify(selector: str | None, output=None, study: bool = False) -> int:
    from .theory import run_checks, taylor_vs_exact_training_study

    results = run_checks(selector)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    payload = {"checks": [r.__dict__ for r in results]}
    if study:
        rep = taylor_vs_exact_training_study()
        print(f"taylor_vs_exact_study: {'PASS' if rep.passed else 'FAIL'} noise={rep.noise_baseline_acc:.3f} "
              f"bilevel={rep.bilevel['final_accuracy']:.3f} pool_matching={rep.pool_matching['final_accuracy']:.3f} "
              f"gaps={json.dumps(rep.gaps)}")
        payload["study"] = rep.to_dict()
        if not rep.passed:
            failed.append(rep)
    print(f"{len(results) - sum(not r.passed for r in results)}/{len(results)} checks passed")
    if output:
        out = check_output_dir(resolve_output(output), force=True)
        (out / "verify.json").write_text(json.dumps(payload, indent=2, default=str) + "\n")
        ExperimentRecord("verify", {"selector": selector, "study": study}, {},
                         {"report": {"path": str(out / "verify.json"),
                                     "checksum": config_hash([r.passed for r in results])}},
                         {"passed": len(failed) == 0}).write(out)
    return EXIT_CHECK if failed else EXIT_OK


def cmd_report(paths) -> int:
    for p in paths:
        d = resolve_output(p)
        print(f"== {d}")
        for rec in lineage(d):
            print(f"  {rec.command:<11} {rec.id}  {rec.created_at}  "
                  f"{json.dumps(rec.metrics, default=str)[:120]}")
        rpt = d / "report.json"
        if rpt.exists():
            data = json.loads(rpt.read_text())
            reps = [EvalReport.from_dict(r) for r in data["reports"]]
            if data.get("baseline"):
                reps.append(EvalReport.from_dict(data["baseline"]))
            print(format_table(reps))
        ver = d / "verify.json"
        if ver.exists():
            checks = json.loads(ver.read_text())["checks"]
            print(f"  verify: {sum(c['passed'] for c in checks)}/{len(checks)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="poolsynth", description="Model-pool statistic-matching dataset distillation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    ap.add_argument("--deterministic", action="store_true",
                    help="torch deterministic algorithms, single thread (also POOLSYNTH_DETERMINISTIC=1)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SCHEMAS:
        p = sub.add_parser(name, help=f"run {name} from a config file")
        p.add_argument("config", nargs="?", help="YAML or JSON config")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument("--print-schema", action="store_true", help="print the config JSON schema and exit")
        if name == "eval":
            p.add_argument("--arch", nargs="+", help="override the config's archs list")
    v = sub.add_parser("verify", help="run theory checks")
    g = v.add_mutually_exclusive_group(required=True)
    g.add_argument("--all", action="store_true", help="every registered check")
    g.add_argument("--check", help="check name or glob")
    g.add_argument("--list", action="store_true", help="list check names")
    v.add_argument("--study", action="store_true", help="also run the unrolled-vs-statistic-matching study")
    v.add_argument("--output", help="directory for verify.json and record.json")
    r = sub.add_parser("report", help="summarize records and reports")
    r.add_argument("paths", nargs="+")
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    _DETERMINISTIC[0] = set_deterministic(True if args.deterministic else None)
    try:
        if args.command == "verify":
            if args.list:
                from .theory import CHECKS
                print("\n".join(CHECKS))
                return EXIT_OK
            return cmd_verify(None if args.all else args.check, args.output, args.study)
        if args.command == "report":
            return cmd_report(args.paths)
        if args.print_schema:
            print(schema_text(args.command))
            return EXIT_OK
        if not args.config:
            raise ConfigError("", "a config file is required")
        overrides = {"archs": args.arch} if getattr(args, "arch", None) else None
        rec = run_command(args.command, args.config, args.force, overrides, ["poolsynth"] + argv)
        print(f"{args.command} done: record {rec.id} in {rec.outputs and next(iter(rec.outputs.values()))['path']}")
        return EXIT_OK
    except (ConfigError, OutputCollisionError) as exc:
        print(f"poolsynth: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"poolsynth: error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PoolSynthError, OSError, ValueError, RuntimeError) as exc:
        print(f"poolsynth: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
