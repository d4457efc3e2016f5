import json
from dataclasses import replace

import numpy as np
import pytest

from lmfuzz import coverage, driver
from lmfuzz.corpus import BOS, EOS, CorpusEmpty, parse_groups, synth_generate
from lmfuzz.difftest import Fingerprint
from lmfuzz.isa import ILLEGAL, decode
from lmfuzz.sim import BugToggle

TINY = driver.StageConfig(
    seed=3,
    model=driver.ModelSection(context_len=32, layers=1, heads=2, model_dim=16, ff_dim=32),
    stage1=driver.Stage1Section(synth_samples=40, epochs=1, batch=8),
    stage2=driver.Stage2Section(epochs=1, updates_per_epoch=1, batch=4, eval_prompts=8),
    stage3=driver.Stage3Section(epochs=1, updates_per_epoch=1, batch=4),
    fuzz=driver.FuzzSection(batch=8, instrs_per_test=6, workers=1),
)


@pytest.fixture(scope="module")
def ckpt():
    return driver.stage1_pretrain(TINY)


# -- configuration ------------------------------------------------------------------

def test_parse_config_overrides():
    cfg = driver.parse_config("""
        [run]
        seed = 9
        [stage2]
        lr = 0.01
        [fuzz]
        top_k = none
        toggles = trace_x0_write
    """)
    assert cfg.seed == 9 and cfg.stage2.lr == 0.01 and cfg.fuzz.top_k is None
    assert cfg.toggles == {BugToggle.TRACE_X0_WRITE}
    assert cfg.stage1 == driver.Stage1Section()


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[stage1]\nnot_a_key = 1\n",
    "[stage1]\nepochs = ten\n",
    "[stage1]\nepochs = 0\n",
    "[stage2]\nprompt_min = 4\nprompt_max = 2\n",
    "[fuzz]\ntoggles = NOT_A_BUG\n",
    "[fuzz]\nprompts = sometimes\n",
    "[run]\nverbose = 1\n",
    "no section header\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(driver.ConfigError):
        driver.parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(driver.ConfigError):
        driver.load_config(tmp_path / "missing.ini")


def test_prompt_range_must_fit_context():
    with pytest.raises(driver.ConfigError):
        replace(TINY, model=replace(TINY.model, context_len=16))


# -- stages ------------------------------------------------------------------------------

def test_stage1_empty_corpus(tmp_path):
    with pytest.raises(CorpusEmpty):
        driver.stage1_pretrain(replace(TINY, stage1=replace(TINY.stage1, synth_samples=0)))
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    with pytest.raises(CorpusEmpty):
        driver.stage1_pretrain(replace(TINY, stage1=replace(TINY.stage1, corpus_path=str(empty))))


def test_stage1_from_ingested_corpus(tmp_path):
    from lmfuzz.corpus import write_listing
    path = tmp_path / "corpus.txt"
    path.write_text(write_listing(synth_generate(10, 0)))
    ck = driver.stage1_pretrain(replace(TINY, stage1=replace(TINY.stage1, corpus_path=str(path))))
    assert ck.meta["corpus_size"] == 10


def test_stage1_is_deterministic(ckpt):
    again = driver.stage1_pretrain(TINY)
    assert again.params.to_bytes() == ckpt.params.to_bytes()
    assert len(ckpt.meta["loss_curve"]) == 1 and ckpt.meta["stage"] == 1


def test_stage2_and_stage3_run(ckpt, tmp_path):
    c2 = driver.stage2_refine(ckpt, TINY)
    assert len(c2.meta["stage2_log"]) == 1 and 0 <= c2.meta["initial_invalid_rate"] <= 1
    assert c2.meta["stage2_log"] == driver.stage2_refine(ckpt, TINY).meta["stage2_log"]
    c3 = driver.stage3_optimize(c2, TINY, workers=1)
    assert len(c3.meta["stage3_log"]) == 1 and c3.meta["stage"] == 3
    c3.save(tmp_path / "s3.ckpt")
    back = driver.Checkpoint.load(tmp_path / "s3.ckpt")
    assert back.params.to_bytes() == c3.params.to_bytes() and back.meta == json.loads(json.dumps(c3.meta))
    assert set(back.value) == set(c3.value)


def test_checkpoint_write_failure(ckpt, tmp_path):
    with pytest.raises(driver.IoFailure):
        ckpt.save(tmp_path / "no" / "such" / "dir" / "x.ckpt")


def test_invalid_rate_bounds(ckpt):
    rate = driver.invalid_rate(ckpt.params, driver.heldout_prompts(TINY), 0)
    assert 0.0 <= rate <= 1.0
    assert rate == driver.invalid_rate(ckpt.params, driver.heldout_prompts(TINY), 0)


def test_prompts_hold_configured_instruction_counts():
    assert driver.heldout_prompts(TINY, 4) == driver.heldout_prompts(TINY, 4)
    prompts = driver.draw_prompts(TINY, 32, np.random.default_rng(0)) + driver.heldout_prompts(TINY)
    for p in prompts:
        assert p[0] == BOS and EOS not in p
        groups = parse_groups(p)
        assert 2 <= len(groups) <= 5 and all(g.instr is not None for g in groups)


# -- fuzzing -------------------------------------------------------------------------------

def test_budget_zero_gives_empty_report(ckpt, tmp_path):
    for r in (driver.fuzz(ckpt, 0, TINY), driver.baseline_random_fuzz(0, TINY)):
        assert r.tests == 0 and r.coverage_percent == 0.0 and r.raw_mismatches == 0
        driver.report(r, tmp_path / r.label, plot=False)
        assert (tmp_path / r.label / "coverage.csv").read_text().splitlines() == [
            "test_id,standalone,incremental,total,percent,unique_mismatches"]
        assert (tmp_path / r.label / "mismatches.csv").read_text().splitlines() == [
            "mnemonic,kind,exceptions,count,exemplar_program,step"]


def test_negative_budget():
    with pytest.raises(ValueError):
        driver.baseline_random_fuzz(-1, TINY)


def test_budget_accounting(ckpt):
    r = driver.fuzz(ckpt, 19, TINY)
    assert r.tests == 19 and [row.test_id for row in r.series] == list(range(1, 20))
    assert sum(row.incremental for row in r.series) == r.series[-1].total == len(r.covered)
    totals = [row.total for row in r.series]
    assert totals == sorted(totals)
    assert sum(c for c, _ in r.table.values()) == r.raw_mismatches


def test_fuzz_determinism_and_parallel_agreement(ckpt):
    a = driver.fuzz(ckpt, 12, TINY, seed=5)
    b = driver.fuzz(ckpt, 12, TINY, seed=5, workers=2)
    assert a.series == b.series and a.table == b.table and a.covered == b.covered
    c = driver.fuzz(ckpt, 12, TINY, seed=6)
    assert c.seeds["seed"] == 6


def test_baseline_programs_are_valid():
    for i in range(50):
        prog = driver.random_program(0, i, 32)
        assert len(prog) == 32 and all(decode(w) is not ILLEGAL for w in prog)
    assert driver.random_program(0, 3, 8) == driver.random_program(0, 3, 8)


def test_baseline_finds_injected_bugs():
    r = driver.baseline_random_fuzz(64, TINY)
    assert r.raw_mismatches > 0 and r.toggles_found()
    none = driver.baseline_random_fuzz(16, replace(TINY, fuzz=replace(TINY.fuzz, toggles="none")))
    assert none.raw_mismatches == 0


def test_filters_drop_matching_mismatches(tmp_path):
    rules = tmp_path / "rules.txt"
    rules.write_text("kind=ExtraRegWrite  # x0 writes are known\n")
    cfg = replace(TINY, fuzz=replace(TINY.fuzz, filters=str(rules)))
    r = driver.baseline_random_fuzz(64, cfg)
    assert all(fp.kind != "ExtraRegWrite" for fp in r.table)
    with pytest.raises(driver.IoFailure):
        driver.baseline_random_fuzz(1, replace(TINY, fuzz=replace(TINY.fuzz, filters=str(tmp_path / "x"))))


@pytest.mark.parametrize("fp,toggle", [
    (Fingerprint("MUL", "MissingRegWrite", "-/-"), BugToggle.TRACE_OMIT_MULDIV_WB),
    (Fingerprint("ADD", "MissingRegWrite", "-/-"), None),
    (Fingerprint("ADDI", "ExtraRegWrite", "-/-"), BugToggle.TRACE_X0_WRITE),
    (Fingerprint("LW", "ExceptionKind", "LoadAccessFault/LoadAddressMisaligned"), BugToggle.EXC_PRIORITY_SWAP),
    (Fingerprint("LW", "ExceptionKind", "LoadAddressMisaligned/LoadAccessFault"), None),
    (Fingerprint("SW", "ControlFlowDivergence", "-/-"), BugToggle.STALE_IFETCH_NO_FENCEI),
])
def test_attribution(fp, toggle):
    assert driver.attribute(fp) == toggle


@pytest.mark.parametrize("toggle", list(BugToggle))
def test_directed_replays(toggle):
    kind = driver.DIRECTED[toggle][0]
    _, _, ms = driver.replay(driver.directed_program(toggle), TINY, {toggle})
    assert ms and ms[0].kind == kind and driver.attribute(
        Fingerprint(ms[0].mnemonic, ms[0].kind, ms[0].exception_pair)) == toggle
    _, _, none = driver.replay(driver.directed_program(toggle), TINY, set())
    assert none == []


# -- reports ---------------------------------------------------------------------------------

def _bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_report_is_byte_identical(ckpt, tmp_path):
    for name in ("a", "b"):
        driver.report(driver.fuzz(ckpt, 10, TINY, seed=2), tmp_path / name)
    a, b = _bytes(tmp_path / "a"), _bytes(tmp_path / "b")
    assert a == b
    assert set(a) == {"coverage.csv", "mismatches.csv", "covered_points.csv", "run.json",
                      "series.csv", "coverage.png"}
    meta = json.loads(a["run.json"])
    assert "wall_clock" not in json.dumps(meta) and meta["tests"] == 10
    assert meta["catalog_hash"] == coverage.catalog_hash()


def test_report_roundtrip_and_comparison(ckpt, tmp_path):
    m = driver.fuzz(ckpt, 10, TINY)
    b = driver.baseline_random_fuzz(6, TINY)
    driver.report(m, tmp_path / "m", plot=False)
    back = driver.load_report(tmp_path / "m")
    assert back.series == m.series and back.covered == m.covered and back.label == "model"
    written = driver.report([back, b], tmp_path / "cmp")
    assert {p.name for p in written} == {"run.json", "series.csv", "coverage.png"}
    lines = (tmp_path / "cmp" / "series.csv").read_text().splitlines()
    assert lines[0] == "tests,model,baseline" and len(lines) == 11
    assert lines[-1].split(",")[2] == f"{b.coverage_percent:.6f}"  # padded with the last value
    assert len(json.loads((tmp_path / "cmp" / "run.json").read_text())["runs"]) == 2
    with pytest.raises(driver.IoFailure):
        driver.load_report(tmp_path / "cmp")
    with pytest.raises(driver.IoFailure):
        driver.load_report(tmp_path / "nothing")
