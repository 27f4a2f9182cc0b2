import contextlib
import io
import json
import random

import pytest

from helpers import (
    TemplateRewriter,
    build_transcript,
    make_relation,
    random_table,
    words,
)
from kgharvest import cli
from kgharvest.backends import save_mock_table
from kgharvest.relations import read_kg, save_relation

REWRITES = (
    "{B} can follow {A}",
    "whoever wants {B} should look into {A}",
    "experts agree that {A} leads to {B}",
)

COLLECT = dict(min_count=4, max_rounds=2, rng_seed=7)


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = cli.main([str(a) for a in argv])
        except SystemExit as exc:
            code = exc.code if isinstance(exc.code, int) else 2
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def ws(tmp_path):
    """A complete CLI workspace: relation, table, transcript, positives."""
    rng = random.Random(41)
    vocab = words(6)
    rel = make_relation(2, vocab, name="risk")
    save_relation(rel, tmp_path / "risk.rel")

    texts = [rel.initial_prompt.text, *REWRITES]
    table = random_table(rng, vocab, texts, 2, 1, hot_per_lv=4, scorer_id="mock-cli")
    save_mock_table(table, tmp_path / "risk.table.json")

    para = TemplateRewriter(rel.seed_tuples, REWRITES)
    build_transcript(tmp_path / "risk.transcript.json", rel, para, **COLLECT)

    (tmp_path / "pos.tsv").write_text(
        "risk\tw00\tw01\nrisk\tw01\tw02\nrisk\tw03\tw04\n"
    )
    return tmp_path


def _prompts(ws, out="risk.prompts", extra=()):
    return run_cli(
        [
            "prompts",
            "--relation", ws / "risk.rel",
            "--paraphraser", ws / "risk.transcript.json",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--min-count", 4,
            "--max-rounds", 2,
            "--seed", 7,
            "--out", ws / out,
            *extra,
        ]
    )


def _harvest(ws, out="risk.kg", extra=()):
    return run_cli(
        [
            "harvest",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--max-candidates", 10,
            "--lmax", 1,
            "--top", "top-half",
            "--workers", 1,
            "--out", ws / out,
            *extra,
        ]
    )


# ---------------------------------------------------------------------------
# prompts


def test_prompts_writes_weighted_set(ws):
    code, out, err = _prompts(ws)
    assert code == 0, err
    assert "wrote" in out
    doc = json.loads((ws / "risk.prompts").read_text())
    assert doc["relation"] == "risk"
    assert len(doc["prompts"]) >= 4
    weights = [float(p["weight"]) for p in doc["prompts"]]
    assert sum(weights) == pytest.approx(1.0, abs=1e-9)


def test_prompts_is_byte_deterministic(ws):
    assert _prompts(ws, out="a.prompts")[0] == 0
    assert _prompts(ws, out="b.prompts")[0] == 0
    assert (ws / "a.prompts").read_bytes() == (ws / "b.prompts").read_bytes()


def test_prompts_dead_transcript_is_service_exit(ws):
    (ws / "empty.json").write_text("[]")
    code, _, err = run_cli(
        [
            "prompts",
            "--relation", ws / "risk.rel",
            "--paraphraser", ws / "empty.json",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--min-count", 4,
            "--out", ws / "x.prompts",
        ]
    )
    assert code == 3
    assert "error" in err


def test_missing_scorer_is_validation_exit(ws, monkeypatch):
    monkeypatch.delenv("KGH_LM_ENDPOINT", raising=False)
    code, _, err = run_cli(
        [
            "prompts",
            "--relation", ws / "risk.rel",
            "--paraphraser", ws / "risk.transcript.json",
            "--min-count", 4,
            "--seed", 7,
            "--out", ws / "x.prompts",
        ]
    )
    assert code == 2
    assert "no scorer" in err


def test_scorer_env_default(ws, monkeypatch):
    monkeypatch.setenv("KGH_LM_ENDPOINT", f"mock:{ws / 'risk.table.json'}")
    code, _, err = run_cli(
        [
            "prompts",
            "--relation", ws / "risk.rel",
            "--paraphraser", ws / "risk.transcript.json",
            "--min-count", 4,
            "--max-rounds", 2,
            "--seed", 7,
            "--out", ws / "env.prompts",
        ]
    )
    assert code == 0, err
    assert (ws / "env.prompts").exists()


# ---------------------------------------------------------------------------
# harvest


def test_harvest_writes_kg(ws):
    assert _prompts(ws)[0] == 0
    code, out, err = _harvest(ws)
    assert code == 0, err
    kg = read_kg(ws / "risk.kg")
    assert kg.relation_name == "risk"
    assert kg.tuples
    assert kg.provenance.scorer_id == "mock-cli"


def test_harvest_is_byte_deterministic(ws):
    assert _prompts(ws)[0] == 0
    assert _harvest(ws, out="a.kg")[0] == 0
    assert _harvest(ws, out="b.kg")[0] == 0
    assert (ws / "a.kg").read_bytes() == (ws / "b.kg").read_bytes()


def test_harvest_resume_reuses_proposal(ws):
    assert _prompts(ws)[0] == 0
    code, _, err = _harvest(ws, out="full.kg", extra=["--checkpoint", ws / "c.ckpt"])
    assert code == 0, err

    code, _, err = run_cli(
        [
            "harvest",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--max-candidates", 10,
            "--lmax", 1,
            "--top", "top-k:3",
            "--resume", ws / "c.ckpt",
            "--out", ws / "resumed.kg",
        ]
    )
    assert code == 0, err
    kg = read_kg(ws / "resumed.kg")
    assert len(kg.tuples) == 3
    # selection knobs changed, so provenance differs, but the proposal
    # ranking is shared with the full run
    full = read_kg(ws / "full.kg")
    full_keys = [t.entities for t in full.tuples]
    assert all(t.entities in full_keys for t in kg.tuples[:2])


def test_harvest_resume_rejects_mismatched_proposal_config(ws):
    assert _prompts(ws)[0] == 0
    assert _harvest(ws, extra=["--checkpoint", ws / "c.ckpt"])[0] == 0
    code, _, err = run_cli(
        [
            "harvest",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--max-candidates", 9,  # differs from the checkpointed proposal
            "--lmax", 1,
            "--resume", ws / "c.ckpt",
            "--out", ws / "x.kg",
        ]
    )
    assert code == 2
    assert "checkpoint" in err


def test_harvest_missing_relation_file(ws):
    code, _, err = run_cli(
        [
            "harvest",
            "--relation", ws / "nope.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--out", ws / "x.kg",
        ]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# eval


def _eval(ws, out="curve.csv", extra=()):
    return run_cli(
        [
            "eval",
            "--positives", ws / "pos.tsv",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--method", "multi",
            "--seed", 3,
            "--out", ws / out,
            *extra,
        ]
    )


def test_eval_writes_csv_png_and_summary(ws):
    assert _prompts(ws)[0] == 0
    code, out, err = _eval(ws)
    assert code == 0, err
    assert (ws / "curve.csv").read_text().startswith("cutoff,score,label,")
    png = (ws / "curve.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    summary = json.loads((ws / "curve.csv.summary.json").read_text())
    assert summary["n_pos"] == 3 and summary["n_neg"] == 3
    assert json.loads(out)["n_pos"] == 3


def test_eval_is_byte_deterministic_including_png(ws):
    assert _prompts(ws)[0] == 0
    assert _eval(ws, out="a.csv")[0] == 0
    assert _eval(ws, out="b.csv")[0] == 0
    assert (ws / "a.csv").read_bytes() == (ws / "b.csv").read_bytes()
    assert (ws / "a.png").read_bytes() == (ws / "b.png").read_bytes()


def test_eval_external_overlay_and_custom_plot(ws):
    assert _prompts(ws)[0] == 0
    from kgharvest.evaluation import (
        generate_negatives,
        load_positives_tsv,
        tuple_id,
    )

    # reconstruct the exact sample list the command will rank (--seed 3)
    positives = load_positives_tsv(ws / "pos.tsv")
    samples = positives + generate_negatives(positives, 3)
    ext = ws / "ext.tsv"
    ext.write_text(
        "".join(
            f"{tuple_id(s.relation, s.entities.entities)}\t{-float(i)}\n"
            for i, s in enumerate(samples)
        )
    )
    code, out, err = _eval(
        ws,
        out="c.csv",
        extra=["--external", f"human={ext}", "--plot", ws / "other.png"],
    )
    assert code == 0, err
    assert (ws / "other.png").exists()
    assert not (ws / "c.png").exists()  # --plot overrides the default sibling

    # a file missing one of the ranked samples is a hard error
    ext.write_text(ext.read_text().split("\n", 1)[1])
    assert _eval(ws, out="d.csv", extra=["--external", f"human={ext}"])[0] == 2

    # NAME=FILE shape is enforced
    assert _eval(ws, out="e.csv", extra=["--external", "humanonly"])[0] == 2


def test_eval_service_down_is_exit_3(ws):
    assert _prompts(ws)[0] == 0
    code, _, err = run_cli(
        [
            "eval",
            "--positives", ws / "pos.tsv",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", "http://127.0.0.1:9",
            "--method", "multi",
            "--seed", 3,
            "--out", ws / "x.csv",
        ]
    )
    assert code == 3


# ---------------------------------------------------------------------------
# stats


def test_stats_reports_and_novelty(ws):
    assert _prompts(ws)[0] == 0
    assert _harvest(ws)[0] == 0
    code, out, _ = run_cli(["stats", "--kg", ws / "risk.kg"])
    assert code == 0
    doc = json.loads(out)
    assert doc["tuples"] == len(read_kg(ws / "risk.kg").tuples)
    assert doc["novelty"] is None

    (ws / "ref.txt").write_text("w00\nw01\n")
    code, out, _ = run_cli(
        ["stats", "--kg", ws / "risk.kg", "--reference", ws / "ref.txt",
         "--out", ws / "stats.json"]
    )
    assert code == 0
    doc = json.loads(out)
    assert 0.0 <= float(doc["novelty"]) <= 1.0
    assert json.loads((ws / "stats.json").read_text()) == doc


def test_stats_missing_file_is_exit_2(ws):
    code, _, _ = run_cli(["stats", "--kg", ws / "nope.kg"])
    assert code == 2


# ---------------------------------------------------------------------------
# config file layering


def test_config_supplies_defaults_and_cli_wins(ws):
    assert _prompts(ws)[0] == 0
    (ws / "cfg.json").write_text(json.dumps({"lmax": 1, "top": "top-k:2"}))
    code, _, err = run_cli(
        [
            "--config", ws / "cfg.json",
            "harvest",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--max-candidates", 10,
            "--out", ws / "cfg.kg",
        ]
    )
    assert code == 0, err
    assert len(read_kg(ws / "cfg.kg").tuples) == 2  # top-k:2 from config

    code, _, err = run_cli(
        [
            "--config", ws / "cfg.json",
            "harvest",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--max-candidates", 10,
            "--top", "top-k:4",  # explicit flag beats the config value
            "--out", ws / "cli.kg",
        ]
    )
    assert code == 0, err
    assert len(read_kg(ws / "cli.kg").tuples) == 4


def test_config_unknown_key_is_exit_2(ws):
    (ws / "bad.json").write_text(json.dumps({"lmaxx": 1}))
    code, _, err = run_cli(
        [
            "--config", ws / "bad.json",
            "harvest",
            "--relation", ws / "risk.rel",
            "--prompts", ws / "risk.prompts",
            "--scorer", f"mock:{ws / 'risk.table.json'}",
            "--out", ws / "x.kg",
        ]
    )
    assert code == 2
    assert "unknown keys" in err


def test_config_must_be_json_object(ws):
    (ws / "list.json").write_text("[1, 2]")
    code, _, err = run_cli(
        [
            "--config", ws / "list.json",
            "stats",
            "--kg", ws / "nope.kg",
        ]
    )
    assert code == 2


def test_unknown_flag_is_exit_2(ws):
    code, _, _ = run_cli(["harvest", "--definitely-not-a-flag"])
    assert code == 2


def test_unknown_subcommand_is_exit_2(ws):
    code, _, _ = run_cli(["transmogrify"])
    assert code == 2
