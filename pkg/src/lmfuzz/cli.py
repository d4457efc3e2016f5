"""Command-line entry point (``lmfuzz``).

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import replace
from pathlib import Path

from . import corpus, driver, lm, rl
from .corpus import CorpusEmpty
from .difftest import dedupe, mismatch_csv
from .isa import ParseError, assemble, disassemble_program
from .sim import BugToggle, serialize_trace

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="INI file with [model]/[stage1]/.../[fuzz] sections")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help="output directory (default: out)")
    p.add_argument("--workers", type=int, default=S, help="simulation worker processes")
    p.add_argument("--toggles", default=S, help="comma-separated bug toggles, 'all' or 'none'")
    p.add_argument("--preset", choices=("default", "small"), default=S,
                   help="model size preset applied before the config file")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common)
    p = _Parser(prog="lmfuzz", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-corpus", parents=[common], help="write a synthetic corpus listing")
    s.add_argument("-n", type=int, default=None, help="sample count (default: stage1.synth_samples)")

    sub.add_parser("pretrain", parents=[common], help="stage 1: next-token training on the corpus")
    for name, help_ in (("refine", "stage 2: PPO against the disassembler reward"),
                        ("optimize", "stage 3: PPO against the coverage reward")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint", required=True)

    s = sub.add_parser("fuzz", parents=[common], help="model-driven differential fuzzing")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--budget", type=int, default=2000)
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("baseline", parents=[common], help="random-instruction differential fuzzing")
    s.add_argument("--budget", type=int, default=2000)
    s.add_argument("--no-plot", action="store_true")

    s = sub.add_parser("replay", parents=[common], help="run one program on golden and DUT")
    s.add_argument("program", nargs="?", help="assembly or hex-word listing")
    s.add_argument("--directed", choices=[t.value for t in BugToggle],
                   help="replay the built-in program for this toggle instead")

    s = sub.add_parser("report", parents=[common], help="overlay written run reports")
    s.add_argument("runs", nargs="+", help="run directories written by fuzz/baseline")
    return p


def _config(args) -> driver.StageConfig:
    base = driver.StageConfig()
    if getattr(args, "preset", "default") == "small":
        base = replace(base, model=driver.SMALL_MODEL)
    cfg = driver.load_config(args.config, base) if hasattr(args, "config") else base
    fz = cfg.fuzz
    if hasattr(args, "workers"):
        fz = replace(fz, workers=args.workers)
    if hasattr(args, "toggles"):
        fz = replace(fz, toggles=args.toggles)
    seed = getattr(args, "seed", cfg.seed)
    return replace(cfg, seed=seed, fuzz=fz)


_HEX = re.compile(r"^(0x)?[0-9a-fA-F]{8}$")


def read_program(path: str) -> list[int]:
    text = Path(path).read_text()
    lines = [l.split("#", 1)[0].strip() for l in text.splitlines()]
    lines = [l for l in lines if l]
    if lines and all(_HEX.match(l) for l in lines):
        return [int(l, 16) for l in lines]
    return assemble(text)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise driver.IoFailure(f"cannot write {path}: {e}") from None


def _log_csv(rows, header) -> str:
    return driver._csv(header, rows)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (driver.ConfigError, ValueError) as e:
        print(f"lmfuzz: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(getattr(args, "out", "out"))
    try:
        return _dispatch(args, cfg, out)
    except driver.ConfigError as e:
        print(f"lmfuzz: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CorpusEmpty, ParseError, ValueError, rl.StalePolicy, lm.SequenceTooLong) as e:
        print(f"lmfuzz: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args, cfg: driver.StageConfig, out: Path) -> int:
    cmd = args.command
    if cmd == "synth-corpus":
        n = args.n if args.n is not None else cfg.stage1.synth_samples
        samples = corpus.synth_generate(n, cfg.seed)
        _write(out / "corpus.txt", corpus.write_listing(samples))
        _write(out / "manifest.json", corpus.manifest(n, cfg.seed) + "\n")
        _write(out / "vocab.csv", corpus.vocab().dump_csv())
        print(f"wrote {n} samples to {out / 'corpus.txt'}")
    elif cmd == "pretrain":
        ck = driver.stage1_pretrain(cfg, log=lambda e, l: print(f"epoch {e + 1}: loss {l:.4f}"))
        ck.save(out / "stage1.ckpt")
        _write(out / "stage1_loss.csv",
               _log_csv([(i + 1, f"{l:.6f}") for i, l in enumerate(ck.meta["loss_curve"])], ["epoch", "loss"]))
    elif cmd in ("refine", "optimize"):
        ck = driver.Checkpoint.load(args.checkpoint)
        _check_model(ck, cfg)
        show = lambda row: print(",".join(map(str, row)))
        if cmd == "refine":
            ck = driver.stage2_refine(ck, cfg, log=show)
            ck.save(out / "stage2.ckpt")
            _write(out / "stage2_log.csv", rl.log_csv(ck.meta["stage2_log"]))
        else:
            ck = driver.stage3_optimize(ck, cfg, log=show)
            ck.save(out / "stage3.ckpt")
            _write(out / "stage3_log.csv", rl.log_csv(ck.meta["stage3_log"]))
    elif cmd == "fuzz":
        ck = driver.Checkpoint.load(args.checkpoint)
        r = driver.fuzz(ck, args.budget, cfg)
        driver.report(r, out, plot=not args.no_plot)
        _print_summary(r)
    elif cmd == "baseline":
        r = driver.baseline_random_fuzz(args.budget, cfg)
        driver.report(r, out, plot=not args.no_plot)
        _print_summary(r)
    elif cmd == "replay":
        return _replay(args, cfg, out)
    elif cmd == "report":
        runs = [driver.load_report(d) for d in args.runs]
        driver.report(runs, out)
        for r in runs:
            print(f"{r.label}: {r.tests} tests, {r.coverage_percent:.2f}% coverage")
    return EXIT_OK


def _check_model(ck: driver.Checkpoint, cfg: driver.StageConfig) -> None:
    if ck.params.config.context_len < cfg.stage2.prompt_max * 4 + 2:
        raise driver.ConfigError("checkpoint context is too short for the prompt range")


def _replay(args, cfg: driver.StageConfig, out: Path) -> int:
    if args.directed:
        toggle = BugToggle(args.directed)
        program = driver.directed_program(toggle)
        toggles = {toggle} if not hasattr(args, "toggles") else cfg.toggles
    elif args.program:
        program = read_program(args.program)
        toggles = cfg.toggles
    else:
        print("lmfuzz: error: replay needs a program file or --directed", file=sys.stderr)
        return EXIT_USAGE
    print(disassemble_program(program).text())
    gold, dut, ms = driver.replay(program, cfg, toggles)
    _write(out / "golden.trace", serialize_trace(gold))
    _write(out / "dut.trace", serialize_trace(dut))
    _write(out / "mismatches.csv", mismatch_csv(dedupe(ms)))
    for m in ms:
        print(f"step {m.step}: {m.kind} ({m.mnemonic}, exc {m.exception_pair})")
    print(f"{len(ms)} mismatch(es); traces in {out}")
    return EXIT_OK


def _print_summary(r: driver.RunReport) -> None:
    found = ", ".join(sorted(t.value for t in r.toggles_found())) or "none"
    print(f"{r.label}: {r.tests} tests, coverage {r.coverage_percent:.2f}%, "
          f"{r.raw_mismatches} mismatches, {len(r.table)} unique; toggles seen: {found}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
