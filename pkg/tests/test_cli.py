import json

import numpy as np
import pytest

from duplexcot.cli import EXIT_CONTRACT, EXIT_INFEASIBLE, EXIT_INVALID, Config, config_from_mapping, load_config, load_outputs, main
from duplexcot.core import Mode, joint_modes, load_conversations
from duplexcot.errors import InvalidArgument


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    paths = {k: str(d / v) for k, v in
             {"corpus": "c.jsonl", "codec": "k.json", "model": "m.json", "test": "t.jsonl"}.items()}
    assert main(["gen", "--corpus", paths["corpus"], "--codec", paths["codec"], "--n", "40", "--duration", "30"]) == 0
    assert main(["gen", "--corpus", paths["test"], "--codec", str(d / "k2.json"), "--n", "4", "--duration", "30",
                 "--gen-seed", "77"]) == 0
    assert main(["train", "--corpus", paths["corpus"], "--codec", paths["codec"], "--model", paths["model"],
                 "--variant", "full"]) == 0
    return d, paths


def test_gen_reports_overlap(tmp_path, capsys):
    code, out, _ = run(capsys, "gen", "--corpus", str(tmp_path / "c.jsonl"), "--codec", str(tmp_path / "k.json"),
                       "--n", "3", "--duration", "20", "--json")
    assert code == 0
    rep = json.loads(out)
    assert rep["n_conversations"] == 3 and 0 <= rep["overlap_rate"] <= 1


def test_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--corpus", str(tmp_path / f"{name}.jsonl"), "--codec", str(tmp_path / f"{name}.json"),
                     "--n", "2", "--duration", "10", "--seed", "5"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_gen_rejects_bad_rate(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--corpus", str(tmp_path / "c.jsonl"), "--codec", str(tmp_path / "k.json"),
                       "--overlap-rate", "1.5")
    assert code == EXIT_INVALID and "overlap_rate" in err


def test_run_full_then_eval(pipeline, capsys):
    d, p = pipeline
    out, traces = str(d / "full.jsonl"), str(d / "full_traces.jsonl")
    assert main(["run", "--corpus", p["test"], "--codec", p["codec"], "--model", p["model"], "--variant", "full",
                 "--outputs", out, "--traces", traces]) == 0
    capsys.readouterr()
    code, text, _ = run(capsys, "eval", "--corpus", p["test"], "--codec", p["codec"], "--outputs", out,
                        "--traces", traces, "--judge-corpus", p["corpus"], "--json")
    assert code == 0
    rep = json.loads(text)
    for key in ("rouge1", "rouge2", "rougeL", "perplexity", "overlap_pct", "overlap_precision",
                "overlap_recall", "rtf_mean", "first_token_wait_mean"):
        assert rep[key] is not None, key


def test_run_is_deterministic_and_jobs_agree(pipeline):
    d, p = pipeline
    common = ["run", "--corpus", p["test"], "--codec", p["codec"], "--model", p["model"], "--variant", "full"]
    assert main(common + ["--outputs", str(d / "r1.jsonl"), "--traces", str(d / "t1.jsonl")]) == 0
    assert main(common + ["--outputs", str(d / "r2.jsonl"), "--traces", str(d / "t2.jsonl"), "--jobs", "2"]) == 0
    assert (d / "r1.jsonl").read_bytes() == (d / "r2.jsonl").read_bytes()
    assert (d / "t1.jsonl").read_bytes() == (d / "t2.jsonl").read_bytes()


def test_response_beats_none(pipeline, capsys):
    d, p = pipeline
    scores = {}
    for variant in ("response", "none"):
        model = str(d / f"m_{variant}.json")
        assert main(["train", "--corpus", p["corpus"], "--codec", p["codec"], "--model", model, "--variant", variant]) == 0
        out = str(d / f"o_{variant}.jsonl")
        assert main(["run", "--corpus", p["test"], "--codec", p["codec"], "--model", model, "--variant", variant,
                     "--outputs", out]) == 0
        capsys.readouterr()
        code, text, _ = run(capsys, "eval", "--corpus", p["test"], "--codec", p["codec"], "--outputs", out, "--json")
        scores[variant] = json.loads(text)["rougeL"][2]
    assert scores["response"] > scores["none"]


def test_silence_baseline(pipeline, capsys):
    d, p = pipeline
    out = str(d / "silent.jsonl")
    assert main(["run", "--corpus", p["test"], "--codec", p["codec"], "--model", "silence", "--outputs", out]) == 0
    capsys.readouterr()
    code, text, _ = run(capsys, "eval", "--corpus", p["test"], "--codec", p["codec"], "--outputs", out, "--json")
    rep = json.loads(text)
    assert rep["rougeL"] == [0.0, 0.0, 0.0] and rep["overlap_pct"] == 0.0


def test_turn_engine_via_cli(pipeline, capsys):
    d, p = pipeline
    out = str(d / "turn.jsonl")
    assert main(["run", "--corpus", p["test"], "--codec", p["codec"], "--model", p["model"], "--engine", "turn",
                 "--outputs", out, "--traces", str(d / "turn_traces.jsonl")]) == 0
    outputs = load_outputs(out)
    for conv in load_conversations(p["test"]):
        assert Mode.OVERLAP not in joint_modes(conv.user, outputs[conv.conv_id])


def test_ablate_two_rows(pipeline, capsys):
    d, p = pipeline
    code, text, _ = run(capsys, "ablate", "--corpus", p["test"], "--codec", p["codec"], "--train-corpus", p["corpus"],
                        "--variant", "response", "--sizes", "1,2", "--json")
    assert code == 0
    rep = json.loads(text)
    assert [r["block_s"] for r in rep["rows"]] == [1.0, 2.0]
    assert rep["wait_increasing"]
    code, text, _ = run(capsys, "ablate", "--corpus", p["test"], "--codec", p["codec"], "--model", p["model"],
                        "--sizes", "1,2")
    assert code == 0 and text.splitlines()[0].startswith("block_s,")


def test_targets_command(pipeline, capsys):
    d, p = pipeline
    for mode in ("block", "turn"):
        out = d / f"inst_{mode}.jsonl"
        code, text, _ = run(capsys, "targets", "--corpus", p["test"], "--codec", p["codec"], "--mode", mode,
                            "--out", str(out), "--json")
        assert code == 0 and json.loads(text)["n_instances"] == len(out.read_text().splitlines()) > 0


def test_align_command(tmp_path, capsys):
    em = np.full((4, 3), -5.0)
    em[[0, 1], 0] = 0.0
    em[2, 2] = 0.0
    em[3, 1] = 0.0
    np.save(tmp_path / "em.npy", em)
    code, text, _ = run(capsys, "align", "--emissions", str(tmp_path / "em.npy"), "--target", "0,1",
                        "--words", "hi,yo", "--json")
    assert code == 0
    rep = json.loads(text)
    assert rep["labels"] == [0, 0, 2, 1]
    assert rep["words"] == [{"w": "hi", "start": 1, "end": 2}, {"w": "yo", "start": 4, "end": 4}]


def test_infeasible_alignment_exit_code(tmp_path, capsys):
    np.save(tmp_path / "em.npy", np.zeros((2, 3)))
    code, _, err = run(capsys, "align", "--emissions", str(tmp_path / "em.npy"), "--target", "0,0")
    assert code == EXIT_INFEASIBLE and "frames" in err


def test_contract_violation_exit_code(pipeline, tmp_path, capsys):
    d, p = pipeline
    vocab_size = json.loads(open(p["model"]).read())["vocab_size"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"vocab_size": vocab_size, "rules": [{"context": [], "next": {"1": 0.0}}]}))
    code, _, err = run(capsys, "run", "--corpus", p["test"], "--codec", p["codec"], "--model", str(bad),
                       "--outputs", str(tmp_path / "o.jsonl"))
    assert code == EXIT_CONTRACT


def test_missing_and_malformed_inputs(pipeline, tmp_path, capsys):
    d, p = pipeline
    code, _, _ = run(capsys, "train", "--corpus", str(tmp_path / "nope.jsonl"), "--codec", p["codec"],
                     "--model", str(tmp_path / "m.json"))
    assert code == EXIT_INVALID
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"channels": [{"frames": [0, 3]}, {"frames": [0, 0]}],
                               "fps": 25}).replace('"frames": [0, 3]', '"frames": [0, 3], "words": [{"w": "x", "start": 1, "end": 1}]') + "\n")
    code, _, err = run(capsys, "targets", "--corpus", str(bad), "--codec", p["codec"], "--out", str(tmp_path / "i"))
    assert code == EXIT_INVALID and "silent inside a word span" in err
    code, _, _ = run(capsys, "train", "--codec", p["codec"], "--model", str(tmp_path / "m.json"))
    assert code == EXIT_INVALID


def test_config_file_and_overrides(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(
        'seed = 3\nn_block_s = 1.0\nvariant = "response"\n'
        "[spe]\nn_candidates = 4\n"
        "[synthetic]\nn_conversations = 2\nduration_s = 10\n"
        f'[paths]\ncorpus = "{tmp_path / "c.jsonl"}"\ncodec = "{tmp_path / "k.json"}"\n'
    )
    cfg = load_config(cfg_path)
    assert cfg.n_block == 25 and cfg.spe.n_candidates == 4 and cfg.engine().variant.value == "response"
    code, text, _ = run(capsys, "gen", "--config", str(cfg_path), "--json")
    assert code == 0 and json.loads(text)["n_conversations"] == 2
    code, text, _ = run(capsys, "gen", "--config", str(cfg_path), "--n", "1", "--json")
    assert json.loads(text)["n_conversations"] == 1


@pytest.mark.parametrize("data", [{"colour": 1}, {"spe": {"beam": 3}}, {"paths": {"elsewhere": "x"}},
                                  {"synthetic": {"speed": 2}}, {"variant": "maximal"}, {"delta": 0}])
def test_config_rejects_unknown_or_invalid(data):
    with pytest.raises(InvalidArgument):
        config_from_mapping(data)


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "cfg.toml"
    p.write_text("mystery = 1\n")
    code, _, err = run(capsys, "gen", "--config", str(p))
    assert code == EXIT_INVALID and "mystery" in err
    p.write_text("not toml = = 1\n")
    assert run(capsys, "gen", "--config", str(p))[0] == EXIT_INVALID


def test_sub_seeds_are_distinct_and_stable():
    cfg = Config(seed=1)
    assert cfg.sub_seed("gen") != cfg.sub_seed("run")
    assert cfg.sub_seed("gen") == Config(seed=1).sub_seed("gen")
    assert cfg.sub_seed("gen") != Config(seed=2).sub_seed("gen")
