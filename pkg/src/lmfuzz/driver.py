"""Three-stage training pipeline, fuzz loop, random baseline and reports."""

from __future__ import annotations

import configparser
import csv
import io
import json
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import coverage, lm, rl
from .corpus import BOS, CorpusEmpty, CorpusSample, ingest, sample_rng, synth_generate, token_words, tokenize, vocab
from .difftest import (Fingerprint, Mismatch, apply_filters, compare, dedupe, fingerprint,
                       mismatch_csv, parse_rules)
from .isa import MULDIV, SPECS, Instruction, assemble, encode, imm_range, operand_fields
from .sim import BugToggle, ExecConfig, run

DEFAULT_WORKERS = 10


class ConfigError(ValueError):
    pass


class IoFailure(OSError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class ModelSection:
    context_len: int = 128
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512

    def lm_config(self, seed: int) -> lm.LmConfig:
        return lm.LmConfig(vocab_size=len(vocab()), seed=seed, **asdict(self))


SMALL_MODEL = ModelSection(layers=2, heads=4, model_dim=64, ff_dim=256)


@dataclass(frozen=True)
class Stage1Section:
    corpus_path: str | None = None
    synth_samples: int = 50_000
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 32


@dataclass(frozen=True)
class Stage2Section:
    dataset_size: int = 51_200
    prompt_min: int = 2
    prompt_max: int = 5
    epochs: int = 30
    updates_per_epoch: int = 4
    batch: int = 64
    lr: float = 3e-4
    invalid_weight: float = 5.0
    eval_prompts: int = 256
    ref_kl: float = 0.2  # KL(policy || stage-1 model) loss weight


@dataclass(frozen=True)
class Stage3Section:
    epochs: int = 15
    updates_per_epoch: int = 4
    batch: int = 64
    lr: float = 1e-4
    w_standalone: float = 1.0
    w_incremental: float = 10.0
    no_improve_penalty: float = 1.0
    ref_kl: float = 0.2  # KL(policy || stage-2 model) loss weight

    @property
    def weights(self) -> rl.ScoreWeights:
        return rl.ScoreWeights(self.w_standalone, self.w_incremental, self.no_improve_penalty)


@dataclass(frozen=True)
class FuzzSection:
    batch: int = 64
    instrs_per_test: int = 32
    temperature: float = 1.0
    top_k: int | None = None
    toggles: str = "all"
    prompts: str = "bos"  # or "corpus": seed generations with corpus prefixes
    filters: str = ""  # path to a filter-rule file
    workers: int = DEFAULT_WORKERS


@dataclass(frozen=True)
class ExecSection:
    mem_size: int = 64 * 1024
    step_cap: int = 4096


@dataclass(frozen=True)
class StageConfig:
    seed: int = 0
    model: ModelSection = ModelSection()
    stage1: Stage1Section = Stage1Section()
    stage2: Stage2Section = Stage2Section()
    stage3: Stage3Section = Stage3Section()
    fuzz: FuzzSection = FuzzSection()
    exec: ExecSection = ExecSection()

    def __post_init__(self):
        s2 = self.stage2
        if not 1 <= s2.prompt_min <= s2.prompt_max:
            raise ConfigError("prompt range must satisfy 1 <= min <= max")
        if s2.prompt_max * 4 + 1 >= self.model.context_len:
            raise ConfigError("prompt range must fit inside the context")
        for name in ("stage1", "stage2", "stage3"):
            if getattr(self, name).epochs <= 0:
                raise ConfigError(f"{name}.epochs must be positive")
        if self.fuzz.batch <= 0 or self.fuzz.instrs_per_test <= 0:
            raise ConfigError("fuzz batch and instrs_per_test must be positive")
        if self.fuzz.prompts not in ("bos", "corpus"):
            raise ConfigError("fuzz.prompts must be 'bos' or 'corpus'")
        try:
            BugToggle.parse(self.fuzz.toggles)
        except ValueError as e:
            raise ConfigError(f"bad toggle list: {e}") from None

    def exec_config(self, toggles: Iterable[BugToggle] = ()) -> ExecConfig:
        return ExecConfig(self.exec.mem_size, 0, self.exec.step_cap, frozenset(toggles))

    @property
    def toggles(self) -> frozenset[BugToggle]:
        return BugToggle.parse(self.fuzz.toggles)

    def snapshot(self) -> dict:
        return asdict(self)


_SECTIONS = ("model", "stage1", "stage2", "stage3", "fuzz", "exec")


def _coerce(cls, name: str, raw: str):
    hint = typing.get_type_hints(cls)[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if raw.strip().lower() in ("", "none") and type(None) in typing.get_args(hint):
        return None
    target = args[0] if args else hint
    try:
        if target is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return target(raw.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {target.__name__}") from None


def parse_config(text: str, base: StageConfig = StageConfig()) -> StageConfig:
    """INI text (``[stage1]`` ... sections, ``key = value``) over ``base``."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    updates: dict = {}
    for sec in cp.sections():
        if sec == "run":
            for k, v in cp[sec].items():
                if k != "seed":
                    raise ConfigError(f"unknown key run.{k}")
                updates["seed"] = _coerce(StageConfig, "seed", v)
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        current = getattr(base, sec)
        known = {f.name for f in fields(current)}
        vals = {}
        for k, v in cp[sec].items():
            if k not in known:
                raise ConfigError(f"unknown key {sec}.{k}")
            vals[k] = _coerce(type(current), k, v)
        updates[sec] = replace(current, **vals)
    return replace(base, **updates)


def load_config(path: str | Path, base: StageConfig = StageConfig()) -> StageConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, base)


# -- checkpoints -------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: lm.Params
    value: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        try:
            lm.save_checkpoint(path, self.params, self.value, self.meta)
        except OSError as e:
            raise IoFailure(f"cannot write checkpoint {path}: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        params, extra, meta = lm.load_checkpoint(path)
        return cls(params, extra, meta)


# -- data ---------------------------------------------------------------------------------

def load_corpus(cfg: StageConfig) -> list[CorpusSample]:
    s1 = cfg.stage1
    if s1.corpus_path:
        try:
            text = Path(s1.corpus_path).read_text()
        except OSError as e:
            raise IoFailure(f"cannot read corpus {s1.corpus_path}: {e}") from None
        samples = ingest(text).samples
    elif s1.synth_samples > 0:
        samples = synth_generate(s1.synth_samples, cfg.seed)
    else:
        samples = []
    if not samples:
        raise CorpusEmpty("no usable corpus samples")
    return samples


# index ranges inside the seeded synthetic stream
RL_POOL_START = 10_000_000
HELDOUT_START = 20_000_000


def rl_prompt(cfg: StageConfig, index: int, rng: np.random.Generator) -> list[int]:
    """BOS plus the first 2-5 (configurable) instructions of pool sample ``index``."""
    s2 = cfg.stage2
    sample = synth_generate(1, cfg.seed, start=index)[0]
    k = int(rng.integers(s2.prompt_min, s2.prompt_max + 1))
    return tokenize(sample.instrs[:k], bos=True, eos=False)


def draw_prompts(cfg: StageConfig, n: int, rng: np.random.Generator, start: int = RL_POOL_START,
                 pool: int | None = None) -> list[list[int]]:
    pool = cfg.stage2.dataset_size if pool is None else pool
    idx = rng.integers(0, pool, size=n)
    return [rl_prompt(cfg, start + int(i), rng) for i in idx]


def heldout_prompts(cfg: StageConfig, n: int | None = None) -> list[list[int]]:
    n = cfg.stage2.eval_prompts if n is None else n
    rng = np.random.default_rng([cfg.seed, 99])
    return [rl_prompt(cfg, HELDOUT_START + i, rng) for i in range(n)]


def _rng(cfg: StageConfig, *tag: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tag])


# -- stage 1 -------------------------------------------------------------------------------

def stage1_pretrain(cfg: StageConfig, log: Callable[[int, float], None] | None = None,
                    samples: Sequence[CorpusSample] | None = None) -> Checkpoint:
    samples = load_corpus(cfg) if samples is None else list(samples)
    if not samples:
        raise CorpusEmpty("no usable corpus samples")
    s1 = cfg.stage1
    params = lm.init(cfg.model.lm_config(cfg.seed))
    seqs = [tokenize(s) for s in samples]
    params, curve = lm.train(params, seqs, lr=s1.lr, batch=s1.batch, epochs=s1.epochs,
                             seed=cfg.seed, log=log)
    value = rl.init_value_head(cfg.model.model_dim, cfg.seed)
    meta = {"stage": 1, "seed": cfg.seed, "loss_curve": curve, "corpus_size": len(samples)}
    return Checkpoint(params, value, meta)


# -- stage 2 ---------------------------------------------------------------------------------

def invalid_rate(params: lm.Params, prompts: Sequence[Sequence[int]], seed: int = 0,
                 batch: int = 64, slots: int | None = None) -> float:
    """Invalid / N over completions of ``prompts`` (temperature 1), each
    stream holding ``slots`` instruction slots when given."""
    n = bad = 0
    con = rl.SlotBudget(slots, params.config.context_len + 1)
    for start in range(0, len(prompts), batch):
        chunk = prompts[start:start + batch]
        out = lm.sample_batch(params, chunk, rng=np.random.default_rng([seed, start]), constraint=con)
        for s in out:
            g = rl.gen_text(s.tokens[:s.prompt_len], s.completion)
            n += g.N
            bad += g.Invalid
    return bad / n if n else 0.0


def _ppo_hyper(batch: int, lr: float, ref_kl: float) -> rl.PpoHyper:
    return rl.PpoHyper(lr=lr, batch=batch, ref_kl_coef=ref_kl)


def _epoch_row(epoch: int, ms: list[rl.PpoMetrics], progress: float) -> list:
    mean = rl.PpoMetrics(*(float(np.mean([getattr(m, f.name) for m in ms])) for f in fields(rl.PpoMetrics)[:-1]),
                         any(m.kl_flag for m in ms))
    return rl.log_row(epoch, len(ms), mean, progress)


def stage2_refine(ckpt: Checkpoint, cfg: StageConfig,
                  log: Callable[[list], None] | None = None) -> Checkpoint:
    s2 = cfg.stage2
    hyper = _ppo_hyper(s2.batch, s2.lr, s2.ref_kl)
    optim = rl.PpoOptim.create(hyper)
    params, vp = ckpt.params.copy(), {k: v.copy() for k, v in ckpt.value.items()}
    slots = cfg.fuzz.instrs_per_test
    con = rl.SlotBudget(slots, params.config.context_len + 1)
    held = heldout_prompts(cfg)
    rows = []
    initial = invalid_rate(params, held, cfg.seed, slots=slots)
    for epoch in range(1, s2.epochs + 1):
        ms = []
        for u in range(s2.updates_per_epoch):
            rng = _rng(cfg, 2, epoch, u)
            prompts = draw_prompts(cfg, s2.batch, rng)
            samples = lm.sample_batch(params, prompts, rng=rng, constraint=con)
            rewards = []
            for s in samples:
                g = rl.gen_text(s.tokens[:s.prompt_len], s.completion)
                rewards.append(g.N - s2.invalid_weight * g.Invalid)
            rollouts = rl.build_rollouts(params, vp, samples, rewards, con, hyper)
            if rollouts:
                params, vp, m = rl.ppo_update(params, vp, rollouts, hyper, optim, ckpt.params)
                ms.append(m)
        rate = invalid_rate(params, held, cfg.seed, slots=slots)
        row = _epoch_row(epoch, ms, rate)
        rows.append(row)
        if log:
            log(row)
    meta = dict(ckpt.meta, stage=2, initial_invalid_rate=initial, stage2_log=rows)
    return Checkpoint(params, vp, meta)


# -- simulation workers ---------------------------------------------------------------------

@dataclass(frozen=True)
class TestOutcome:
    hits: frozenset[int]
    mismatches: tuple[Mismatch, ...]
    steps: int
    capped: bool


def simulate(program: Sequence[int], golden: ExecConfig, dut: ExecConfig | None,
             program_id: int | None = None) -> TestOutcome:
    """Golden run (coverage source) and, if given, the DUT run diffed against it."""
    g = run(program, golden)
    ms: tuple[Mismatch, ...] = ()
    if dut is not None and dut.toggles:
        d = run(program, dut)
        ms = tuple(compare(d.trace, g.trace, program_id))
    return TestOutcome(g.hits, ms, len(g.trace), g.capped)


def _simulate_job(job):
    return simulate(*job)


class SimPool:
    """Ordered map of simulation jobs over worker processes (serial if 1)."""

    def __init__(self, workers: int):
        self.workers = max(1, int(workers))
        self._ex = ProcessPoolExecutor(self.workers) if self.workers > 1 else None

    def map(self, jobs: Sequence[tuple]) -> list[TestOutcome]:
        if self._ex is None:
            return [_simulate_job(j) for j in jobs]
        chunk = max(1, len(jobs) // (4 * self.workers))
        return list(self._ex.map(_simulate_job, jobs, chunksize=chunk))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()
            self._ex = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- stage 3 ----------------------------------------------------------------------------------

def stage3_optimize(ckpt: Checkpoint, cfg: StageConfig, workers: int | None = None,
                    log: Callable[[list], None] | None = None) -> Checkpoint:
    s3 = cfg.stage3
    hyper = _ppo_hyper(s3.batch, s3.lr, s3.ref_kl)
    optim = rl.PpoOptim.create(hyper)
    params, vp = ckpt.params.copy(), {k: v.copy() for k, v in ckpt.value.items()}
    con = rl.SlotBudget(cfg.fuzz.instrs_per_test, params.config.context_len + 1)
    golden = cfg.exec_config()
    size = coverage.catalog_size()
    total: frozenset[int] = frozenset()
    rows, series = [], []
    with SimPool(cfg.fuzz.workers if workers is None else workers) as pool:
        for epoch in range(1, s3.epochs + 1):
            ms = []
            inc = 0
            for u in range(s3.updates_per_epoch):
                rng = _rng(cfg, 3, epoch, u)
                prompts = draw_prompts(cfg, s3.batch, rng)
                samples = lm.sample_batch(params, prompts, rng=rng, constraint=con)
                outs = pool.map([(token_words(s.tokens), golden, None) for s in samples])
                rewards = []
                for o in outs:
                    stats, total = coverage.update(total, o.hits)
                    inc += stats.incremental
                    rewards.append(rl.coverage_reward(stats, size, s3.weights))
                rollouts = rl.build_rollouts(params, vp, samples, rewards, con, hyper)
                if rollouts:
                    params, vp, m = rl.ppo_update(params, vp, rollouts, hyper, optim, ckpt.params)
                    ms.append(m)
            series.append(len(total))
            row = _epoch_row(epoch, ms, inc)
            rows.append(row)
            if log:
                log(row)
    meta = dict(ckpt.meta, stage=3, stage3_log=rows, stage3_coverage=series)
    return Checkpoint(params, vp, meta)


# -- fuzzing -------------------------------------------------------------------------------------

@dataclass
class FuzzBatchResult:
    programs: list[list[int]]
    stats: list[coverage.CoverageStats]
    mismatches: list[list[Mismatch]]
    total: frozenset[int]
    wall_clock: float
    table: dict[Fingerprint, tuple[int, Mismatch]]


class SeriesRow(NamedTuple):
    """One row per executed test."""

    test_id: int  # 1-based, so it doubles as "tests executed"
    standalone: int
    incremental: int
    total: int
    percent: float
    unique_mismatches: int


@dataclass
class RunReport:
    label: str
    series: list[SeriesRow]
    config: dict
    seeds: dict
    catalog_hash: str
    table: dict[Fingerprint, tuple[int, Mismatch]] = field(default_factory=dict)
    raw_mismatches: int = 0
    covered: frozenset[int] = frozenset()
    capped_tests: int = 0
    wall_clock: float = 0.0

    @property
    def tests(self) -> int:
        return self.series[-1].test_id if self.series else 0

    @property
    def coverage_percent(self) -> float:
        return self.series[-1].percent if self.series else 0.0

    def toggles_found(self) -> set[BugToggle]:
        return {t for t in map(attribute, self.table) if t is not None}


def attribute(fp: Fingerprint) -> BugToggle | None:
    """Which injected fault a fingerprint points at (None if unexplained)."""
    if fp.kind == "MissingRegWrite" and fp.mnemonic in MULDIV:
        return BugToggle.TRACE_OMIT_MULDIV_WB
    if fp.kind == "ExtraRegWrite":
        return BugToggle.TRACE_X0_WRITE
    if fp.kind == "ExceptionKind":
        dut, _, gold = fp.exceptions.partition("/")
        if dut.endswith("AccessFault") and gold.endswith("AddressMisaligned"):
            return BugToggle.EXC_PRIORITY_SWAP
    if fp.kind == "ControlFlowDivergence":
        return BugToggle.STALE_IFETCH_NO_FENCEI
    return None


class _Fuzzer:
    """Shared batch loop of the model-driven and random fuzzers."""

    def __init__(self, cfg: StageConfig, label: str, seeds: dict, workers: int | None):
        self.cfg = cfg
        self.golden = cfg.exec_config()
        self.dut = cfg.exec_config(cfg.toggles)
        self.rules = _load_rules(cfg.fuzz.filters)
        self.pool = SimPool(cfg.fuzz.workers if workers is None else workers)
        self.total: frozenset[int] = frozenset()
        self.all_mismatches: list[Mismatch] = []
        self.series: list[SeriesRow] = []
        self.seen: set[Fingerprint] = set()
        self.capped = 0
        self.done = 0
        self.report = RunReport(label, self.series, cfg.snapshot(), seeds, coverage.catalog_hash())

    def batch(self, programs: list[list[int]]) -> FuzzBatchResult:
        t0 = time.perf_counter()
        jobs = [(p, self.golden, self.dut, self.done + i) for i, p in enumerate(programs)]
        stats, mms = [], []
        for o in self.pool.map(jobs):
            st, self.total = coverage.update(self.total, o.hits)
            kept = apply_filters(o.mismatches, self.rules)
            self.all_mismatches.extend(kept)
            self.seen.update(fingerprint(m) for m in kept)
            self.done += 1
            self.capped += o.capped
            stats.append(st)
            mms.append(kept)
            self.series.append(SeriesRow(self.done, st.standalone, st.incremental, st.total,
                                         round(coverage.percent(self.total), 6), len(self.seen)))
        return FuzzBatchResult(programs, stats, mms, self.total, time.perf_counter() - t0,
                               dedupe(self.all_mismatches))

    def finish(self, wall: float) -> RunReport:
        self.pool.close()
        r = self.report
        r.table = dedupe(self.all_mismatches)
        r.raw_mismatches = len(self.all_mismatches)
        r.covered = self.total
        r.capped_tests = self.capped
        r.wall_clock = wall
        return r


def _load_rules(path: str):
    if not path:
        return []
    try:
        return parse_rules(Path(path).read_text())
    except OSError as e:
        raise IoFailure(f"cannot read filter rules {path}: {e}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None


def fuzz_prompts(cfg: StageConfig, n: int, rng: np.random.Generator) -> list[list[int]]:
    if cfg.fuzz.prompts == "corpus":
        return draw_prompts(cfg, n, rng)
    return [[BOS] for _ in range(n)]


def fuzz(ckpt: Checkpoint, budget: int, cfg: StageConfig, seed: int | None = None,
         workers: int | None = None) -> RunReport:
    """Generate, simulate and diff exactly ``budget`` tests."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    seed = cfg.seed if seed is None else seed
    f = _Fuzzer(cfg, "model", {"seed": seed, "config_seed": cfg.seed}, workers)
    fz = cfg.fuzz
    con = rl.SlotBudget(fz.instrs_per_test, ckpt.params.config.context_len + 1)
    t0 = time.perf_counter()
    b = 0
    try:
        while f.done < budget:
            n = min(fz.batch, budget - f.done)
            rng = np.random.default_rng([seed, 4, b])
            prompts = fuzz_prompts(cfg, n, rng)
            samples = lm.sample_batch(ckpt.params, prompts, temperature=fz.temperature,
                                      top_k=fz.top_k, rng=rng, constraint=con)
            f.batch([token_words(s.tokens) for s in samples])
            b += 1
    finally:
        f.pool.close()
    return f.finish(time.perf_counter() - t0)


SPECS_ORDER = tuple(SPECS)


def random_instruction(rng: np.random.Generator) -> Instruction:
    """Uniform mnemonic, uniform registers, uniform legal immediate."""
    m = SPECS_ORDER[int(rng.integers(len(SPECS_ORDER)))]
    kw = {}
    for f in operand_fields(m):
        if f == "imm":
            lo, hi = imm_range(m)
            if SPECS[m].fmt in ("B", "J"):
                kw[f] = 2 * int(rng.integers(lo // 2, hi // 2 + 1))
            else:
                kw[f] = int(rng.integers(lo, hi + 1))
        else:
            kw[f] = int(rng.integers(32))
    return Instruction(m, **kw)


def random_program(seed: int, index: int, length: int) -> list[int]:
    rng = sample_rng(seed, index)
    return [encode(random_instruction(rng)) for _ in range(length)]


def baseline_random_fuzz(budget: int, cfg: StageConfig, seed: int | None = None,
                         workers: int | None = None) -> RunReport:
    if budget < 0:
        raise ValueError("budget must be >= 0")
    seed = cfg.seed if seed is None else seed
    f = _Fuzzer(cfg, "baseline", {"seed": seed, "config_seed": cfg.seed}, workers)
    fz = cfg.fuzz
    t0 = time.perf_counter()
    try:
        while f.done < budget:
            n = min(fz.batch, budget - f.done)
            f.batch([random_program(seed, f.done + i, fz.instrs_per_test) for i in range(n)])
    finally:
        f.pool.close()
    return f.finish(time.perf_counter() - t0)


# -- directed replay programs --------------------------------------------------------------------

DIRECTED = {
    BugToggle.TRACE_OMIT_MULDIV_WB: ("MissingRegWrite", """
        addi x1, x0, 3
        addi x2, x0, 5
        mul x3, x1, x2
        ecall
    """),
    BugToggle.TRACE_X0_WRITE: ("ExtraRegWrite", """
        addi x0, x0, 7
        ecall
    """),
    BugToggle.EXC_PRIORITY_SWAP: ("ExceptionKind", """
        lw x1, -1(x0)
    """),
    BugToggle.STALE_IFETCH_NO_FENCEI: ("ControlFlowDivergence", """
        addi x1, x0, 0x73
        sw x1, 12(x0)
        addi x2, x0, 1
        addi x3, x0, 2
        ecall
    """),
}


def directed_program(toggle: BugToggle) -> list[int]:
    return assemble(DIRECTED[toggle][1])


def replay(program: Sequence[int], cfg: StageConfig, toggles: Iterable[BugToggle] | None = None):
    """Run one program on golden and DUT; returns (golden trace, dut trace, mismatches)."""
    toggles = cfg.toggles if toggles is None else frozenset(toggles)
    g = run(program, cfg.exec_config())
    d = run(program, cfg.exec_config(toggles))
    return g.trace, d.trace, compare(d.trace, g.trace, 0)


# -- reports -----------------------------------------------------------------------------------

COVERAGE_HEADER = list(SeriesRow._fields)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def coverage_csv(r: RunReport) -> str:
    return _csv(COVERAGE_HEADER, [(*row[:4], f"{row.percent:.6f}", row.unique_mismatches)
                                  for row in r.series])


def comparison_series(runs: Sequence[RunReport]) -> str:
    """Aligned coverage columns for overlay plotting; shorter runs are padded
    with their last value."""
    n = max((r.tests for r in runs), default=0)
    labels = [r.label for r in runs]
    rows = []
    for t in range(1, n + 1):
        row = [t]
        for r in runs:
            i = min(t, len(r.series)) - 1
            row.append(f"{r.series[i].percent:.6f}" if i >= 0 else "")
        rows.append(row)
    return _csv(["tests", *labels], rows)


def summary(r: RunReport) -> dict:
    return {
        "label": r.label,
        "tests": r.tests,
        "coverage_percent": round(r.coverage_percent, 6),
        "covered_points": len(r.covered),
        "catalog_size": coverage.catalog_size(),
        "catalog_hash": r.catalog_hash,
        "raw_mismatches": r.raw_mismatches,
        "unique_mismatches": r.series[-1].unique_mismatches if r.series else 0,
        "capped_tests": r.capped_tests,
        "toggles_found": sorted(t.value for t in r.toggles_found()),
        "seeds": r.seeds,
        "config": r.config,
    }


def report(run_or_runs: RunReport | Sequence[RunReport], out_dir: str | Path,
           plot: bool = True) -> list[Path]:
    """Write CSVs, run.json and (optionally) a coverage plot.

    Wall-clock time is deliberately left out so equal runs give equal bytes.
    """
    runs = [run_or_runs] if isinstance(run_or_runs, RunReport) else list(run_or_runs)
    out = Path(out_dir)
    files: dict[str, str] = {}
    if len(runs) == 1:
        r = runs[0]
        files["coverage.csv"] = coverage_csv(r)
        files["mismatches.csv"] = mismatch_csv(r.table)
        files["covered_points.csv"] = _csv(["id", "name"], [(i, coverage.catalog()[i].name)
                                                           for i in sorted(r.covered)])
        files["run.json"] = json.dumps(summary(r), indent=2, sort_keys=True) + "\n"
    else:
        files["run.json"] = json.dumps({"runs": [summary(r) for r in runs]},
                                       indent=2, sort_keys=True) + "\n"
    files["series.csv"] = comparison_series(runs)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text)
            written.append(out / name)
        if plot:
            from .plots import coverage_plot
            png = out / "coverage.png"
            coverage_plot(runs, png)
            written.append(png)
    except OSError as e:
        raise IoFailure(f"cannot write report to {out}: {e}") from None
    return written


def load_report(run_dir: str | Path) -> RunReport:
    """Rebuild the plotting-relevant part of a written single-run report."""
    d = Path(run_dir)
    try:
        meta = json.loads((d / "run.json").read_text())
        rows = (d / "coverage.csv").read_text().splitlines()[1:]
    except (OSError, ValueError) as e:
        raise IoFailure(f"cannot read report in {d}: {e}") from None
    if "runs" in meta:
        raise IoFailure(f"{d} holds a comparison, not a single run")
    series = []
    for line in rows:
        t, sa, inc, tot, pct, u = line.split(",")
        series.append(SeriesRow(int(t), int(sa), int(inc), int(tot), float(pct), int(u)))
    ids = set()
    cp = d / "covered_points.csv"
    if cp.exists():
        ids = {int(l.split(",")[0]) for l in cp.read_text().splitlines()[1:]}
    return RunReport(meta["label"], series, meta["config"], meta["seeds"], meta["catalog_hash"],
                     raw_mismatches=meta["raw_mismatches"], covered=frozenset(ids),
                     capped_tests=meta["capped_tests"])
