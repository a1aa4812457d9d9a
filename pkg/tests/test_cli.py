import json

import pytest

from bdlm.checkpoint import load_checkpoint
from bdlm.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from bdlm.config import parse_config

TINY = """\
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_len = 64
seq_len = 16
block_size = 4
batch_size = 4
steps = 3
convert_steps = 8
decode_block_size = 4
max_new_tokens = 8
eval_samples = 1
warmup_steps = 1
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    (d / "corpus.txt").write_text("abc=abc\n\nxy=yx\n\nhello=world\n\n12=12\n")
    (d / "sft.jsonl").write_text("\n".join(json.dumps({"prompt": p, "response": r})
                                           for p, r in [("ab=", "ab"), ("x=", "x"), ("12=", "12")]) + "\n")
    (d / "dpo.jsonl").write_text(json.dumps({"prompt": "ab=", "chosen": "ab", "rejected": "ba"}) + "\n")
    cfg = str(d / "tiny.cfg")
    assert main(["pretrain", "--config", cfg, "--data", str(d / "corpus.txt"), "--out", str(d / "ar.bdlm")]) == 0
    return d


def run(work, *argv):
    return main([argv[0], "--config", str(work / "tiny.cfg"), *argv[1:]])


class TestPipeline:
    def test_pretrain_artifacts(self, work):
        assert (work / "ar.bdlm").exists()
        assert (work / "ar.bdlm.config").exists()
        recs = [json.loads(l) for l in (work / "ar.bdlm.metrics.jsonl").read_text().splitlines()]
        assert len(recs) == 3 and all(r["block_size"] == 1 for r in recs)

    def test_convert_sft_dpo(self, work, capsys):
        assert run(work, "convert", "--checkpoint", str(work / "ar.bdlm"), "--data", str(work / "corpus.txt"),
                   "--out", str(work / "cv.bdlm")) == EXIT_OK
        recs = [json.loads(l) for l in (work / "cv.bdlm.metrics.jsonl").read_text().splitlines()]
        assert recs[0]["step"] == 3
        assert [r["block_size"] for r in recs][-1] == 4
        assert run(work, "sft", "--checkpoint", str(work / "cv.bdlm"), "--data", str(work / "sft.jsonl"),
                   "--out", str(work / "sft.bdlm")) == EXIT_OK
        final_lr = load_checkpoint(work / "sft.bdlm")[2]["meta"]["final_lr"]
        assert run(work, "dpo", "--checkpoint", str(work / "sft.bdlm"), "--data", str(work / "dpo.jsonl"),
                   "--out", str(work / "dpo.bdlm")) == EXIT_OK
        lrs = {json.loads(l)["lr"] for l in (work / "dpo.bdlm.metrics.jsonl").read_text().splitlines()}
        assert lrs == {final_lr}

    def test_dpo_lr_flag_wins(self, work):
        run(work, "sft", "--checkpoint", str(work / "ar.bdlm"), "--data", str(work / "sft.jsonl"),
            "--out", str(work / "s2.bdlm"))
        assert run(work, "dpo", "--checkpoint", str(work / "s2.bdlm"), "--data", str(work / "dpo.jsonl"),
                   "--out", str(work / "d2.bdlm"), "--lr", "0.0002") == EXIT_OK
        lrs = {json.loads(l)["lr"] for l in (work / "d2.bdlm.metrics.jsonl").read_text().splitlines()}
        assert lrs == {0.0002}

    def test_eval(self, work, capsys):
        capsys.readouterr()
        assert run(work, "eval", "--checkpoint", str(work / "ar.bdlm"), "--data", str(work / "corpus.txt")) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["elbo_nats_per_token"] == -rec["loss_nats_per_token"]
        assert rec["loss_nats_per_token"] > 0

    def test_generate(self, work, capsys):
        capsys.readouterr()
        assert run(work, "generate", "--checkpoint", str(work / "ar.bdlm"), "--prompt", "2+2=", "--threshold",
                   "0.95", "--block-size", "4") == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        metrics = json.loads(lines[-1])
        assert metrics["tpf"] == metrics["generated"] / metrics["forward_passes"]

    def test_merge_identical_bitwise(self, work, capsys):
        src = work / "ar.bdlm"
        ins = []
        for n in "abc":
            p = work / f"{n}.bdlm"
            p.write_bytes(src.read_bytes())
            ins.append(str(p))
        assert run(work, "merge", "--k", "3", "--inputs", *ins, "--out", str(work / "m.bdlm")) == EXIT_OK
        assert (work / "m.bdlm").read_bytes() == src.read_bytes()

    def test_merge_k_too_large(self, work):
        assert run(work, "merge", "--k", "2", "--inputs", str(work / "ar.bdlm"), "--out",
                   str(work / "x.bdlm")) == EXIT_RUNTIME

    def test_bench_grid(self, work, capsys):
        capsys.readouterr()
        out = work / "bench.jsonl"
        assert run(work, "bench", "--checkpoint", str(work / "ar.bdlm"), "--data", str(work / "sft.jsonl"),
                   "--thresholds", "0.85,0.90,0.95", "--block-sizes", "2,4,8", "--limit", "1",
                   "--out", str(out)) == EXIT_OK
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 9
        assert [(r["threshold"], r["block_size"]) for r in rows][:2] == [(0.85, 2), (0.85, 4)]
        assert all({"tpf", "exact_match"} <= set(r) for r in rows)


class TestPrecedence:
    def test_three_layers(self, work, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + "lr = 0.5\nthreshold = 0.8\nsteps = 1\n")
        out = tmp_path / "o.bdlm"
        assert main(["pretrain", "--config", str(cfg), "--data", str(work / "corpus.txt"), "--out", str(out),
                     "--threshold", "0.7"]) == EXIT_OK
        eff = parse_config(str(out) + ".config")
        assert eff.threshold == 0.7          # flag beats file
        assert eff.lr == 0.5                 # file beats default
        assert eff.temperature == 0.0        # default survives


class TestExitCodes:
    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["eval", "--checkpoint", "x"],
        ["eval", "--checkpoint", "x", "--data", "y", "--no-such-flag"],
        ["eval", "--checkpoint", "x", "--data", "y", "--threshold", "1.5"],
        ["eval", "--checkpoint", "x", "--data", "y", "--steps", "lots"],
    ])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_bad_config_key(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("nonsense = 1\n")
        assert main(["eval", "--config", str(p), "--checkpoint", "x", "--data", "y"]) == EXIT_USAGE
        assert "nonsense" in capsys.readouterr().err

    def test_bench_bad_grid(self, work):
        assert run(work, "bench", "--checkpoint", str(work / "ar.bdlm"), "--data", str(work / "sft.jsonl"),
                   "--thresholds", "0.9,2", "--block-sizes", "4") == EXIT_USAGE

    def test_missing_checkpoint(self, work, capsys):
        assert run(work, "eval", "--checkpoint", str(work / "none.bdlm"), "--data", str(work / "corpus.txt")) == 1
        assert "eval" in capsys.readouterr().err

    def test_truncated_checkpoint(self, work, tmp_path):
        bad = tmp_path / "t.bdlm"
        bad.write_bytes((work / "ar.bdlm").read_bytes()[:-4])
        assert run(work, "eval", "--checkpoint", str(bad), "--data", str(work / "corpus.txt")) == EXIT_RUNTIME

    def test_empty_data(self, work, tmp_path):
        empty = tmp_path / "e.jsonl"
        empty.write_text("not json\n")
        assert run(work, "sft", "--checkpoint", str(work / "ar.bdlm"), "--data", str(empty),
                   "--out", str(tmp_path / "o.bdlm")) == EXIT_RUNTIME

    def test_help_is_success(self):
        assert main(["--help"]) == EXIT_OK
