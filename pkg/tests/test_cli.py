import argparse
import contextlib
import datetime
import io
import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import yaml

from toxic_spans import __version__
from toxic_spans.cli import (
    get_hub_settings,
    json_serializer,
    main,
    parse_cells,
    resolve_model_config,
)
from toxic_spans.corpus import Vocabulary, load_tokenized
from toxic_spans.embeddings import LanguageModelTable
from toxic_spans.evaluation import decode_gold, write_predictions

from tests.synthetic import NEUTRAL_WORDS, TOXIC_WORDS, synthetic_posts, write_synthetic_csv

TINY_MODEL = ["--epochs", "2", "--max-len", "12", "--hidden-size", "8", "--dense-units", "8",
              "--batch-size", "8"]


def run(argv):
    """Run the CLI, returning (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def stub_loader(name, cache_dir=None, local_files_only=False):
    table = np.random.default_rng(len(name)).normal(size=(4, 6)).astype(np.float32)
    return LanguageModelTable(name=name, tokenize=lambda word: [len(word) % 4], table=table, unk_id=0)


class PipelineTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.train_csv = self.root / "train.csv"
        self.dev_csv = self.root / "dev.csv"
        write_synthetic_csv(self.train_csv, synthetic_posts(32))
        write_synthetic_csv(self.dev_csv, synthetic_posts(8, seed=1))

        rng = np.random.default_rng(0)
        self.glove = self.root / "glove.txt"
        with open(self.glove, "w", encoding="utf-8") as f:
            for word in TOXIC_WORDS + NEUTRAL_WORDS[:30]:
                f.write(word + " " + " ".join(f"{v:.4f}" for v in rng.normal(size=4)) + "\n")

        self.env = mock.patch.dict(os.environ, {"TOXIC_SPANS_VECTOR_CACHE": str(self.root / "cache")})
        self.env.start()

    def tearDown(self):
        self.env.stop()
        self.tmp.cleanup()

    def prepare(self):
        code, _, _ = run(["prepare", "--data", str(self.train_csv), "--out-dir", str(self.root / "prepared")])
        self.assertEqual(code, 0)
        return self.root / "prepared"

    def rows(self, prepared):
        return len(Vocabulary.load(prepared / "vocab.json"))


class TestPrepare(PipelineTestCase):

    def test_outputs(self):
        code, out, _ = run(["prepare", "--data", str(self.train_csv), "--out-dir", str(self.root / "prepared")])

        self.assertEqual(code, 0)
        self.assertIn("posts: 32", out)
        for name in ["train.jsonl", "vocab.json", "train_stats.json", "prepare_manifest.json"]:
            self.assertTrue((self.root / "prepared" / name).exists(), name)
        self.assertEqual(len(load_tokenized(self.root / "prepared" / "train.jsonl")), 32)

        with open(self.root / "prepared" / "prepare_manifest.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["command"], "prepare")
        self.assertEqual(manifest["version"], __version__)
        self.assertIsNotNone(manifest["finished_at"])

    def test_repeated_runs_differ_only_in_timestamps(self):
        prepared = self.root / "prepared"
        snapshots = []
        for _ in range(2):
            self.prepare()
            with open(prepared / "prepare_manifest.json", "r", encoding="utf-8") as f:
                manifest = json.load(f)
            for key in ("started_at", "finished_at"):
                manifest.pop(key)
            files = {name: (prepared / name).read_bytes()
                     for name in ("train.jsonl", "vocab.json", "train_stats.json")}
            snapshots.append((json.dumps(manifest, sort_keys=True), files))
        self.assertEqual(snapshots[0], snapshots[1])

    def test_dev_split_with_existing_vocab(self):
        prepared = self.prepare()
        code, out, _ = run(["prepare", "--data", str(self.dev_csv), "--out-dir", str(prepared),
                            "--split", "dev", "--vocab", str(prepared / "vocab.json")])
        self.assertEqual(code, 0)
        self.assertIn("Split: dev", out)
        self.assertIn("posts: 8", out)
        self.assertTrue((prepared / "dev.jsonl").exists())

    def test_header_only_file(self):
        empty = self.root / "empty.csv"
        empty.write_text("spans,text\n", encoding="utf-8")
        with self.assertLogs("toxic_spans.cli", level="WARNING"):
            code, out, _ = run(["prepare", "--data", str(empty), "--out-dir", str(self.root / "empty")])
        self.assertEqual(code, 0)
        self.assertIn("posts: 0", out)

    def test_missing_file_names_stage(self):
        code, _, err = run(["prepare", "--data", str(self.root / "missing.csv"), "--out-dir", str(self.root)])
        self.assertEqual(code, 1)
        self.assertIn("Error [prepare]", err)


class TestEmbed(PipelineTestCase):

    def test_glove_matrix(self):
        prepared = self.prepare()
        code, out, _ = run(["embed", "--vocab", str(prepared / "vocab.json"), "--config", "GloVe",
                            "--glove", str(self.glove), "--out", str(self.root / "emb" / "matrix.bin")])
        self.assertEqual(code, 0)
        self.assertIn(f"Matrix: {self.rows(prepared)} x 4", out)
        self.assertTrue((self.root / "emb" / "embed_manifest.json").exists())

    def test_language_model_widths(self):
        prepared = self.prepare()
        with mock.patch("toxic_spans.cli.load_language_model", side_effect=stub_loader):
            code, out, _ = run(["embed", "--vocab", str(prepared / "vocab.json"), "--config", "Ensemble",
                                "--glove", str(self.glove), "--out", str(self.root / "ensemble.bin")])
            self.assertEqual(code, 0)
            self.assertIn(f"Matrix: {self.rows(prepared)} x 10", out)

            code, out, _ = run(["embed", "--vocab", str(prepared / "vocab.json"), "--config", "RG",
                                "--out", str(self.root / "rg.bin")])
            self.assertEqual(code, 0)
            self.assertIn(f"Matrix: {self.rows(prepared)} x 6", out)

    def test_nonce_vocabulary_warns(self):
        vocab = self.root / "vocab.json"
        nonce = self.root / "nonce.csv"
        nonce.write_text('spans,text\n[],zzqxfiltered qqzzv\n', encoding="utf-8")
        run(["prepare", "--data", str(nonce), "--out-dir", str(self.root)])
        with self.assertLogs("toxic_spans.cli", level="WARNING") as logs:
            code, out, _ = run(["embed", "--vocab", str(vocab), "--config", "GloVe",
                                "--glove", str(self.glove), "--out", str(self.root / "nonce.bin")])
        self.assertEqual(code, 0)
        self.assertIn("GloVe OOV: 2 of 2", out)
        self.assertTrue(any("100%" in line for line in logs.output))


class TestTrainPredictEvaluate(PipelineTestCase):

    def test_pipeline(self):
        prepared = self.prepare()
        run(["prepare", "--data", str(self.dev_csv), "--out-dir", str(prepared), "--split", "dev",
             "--vocab", str(prepared / "vocab.json")])
        matrix = self.root / "matrix.bin"
        run(["embed", "--vocab", str(prepared / "vocab.json"), "--config", "GloVe",
             "--glove", str(self.glove), "--out", str(matrix)])

        run_dir = self.root / "run"
        code, out, err = run(["train", "--train", str(prepared / "train.jsonl"), "--dev", str(prepared / "dev.jsonl"),
                              "--vocab", str(prepared / "vocab.json"), "--embeddings", str(matrix),
                              "--out-dir", str(run_dir)] + TINY_MODEL)
        self.assertEqual(code, 0, err)
        self.assertIn("Trained BiGRU+Attention", out)
        self.assertTrue((run_dir / "checkpoints" / "last.pt").exists())
        self.assertTrue((run_dir / "checkpoints" / "best_dev.pt").exists())
        with open(run_dir / "training_log.jsonl", "r", encoding="utf-8") as f:
            self.assertEqual(len(f.readlines()), 2)
        with open(run_dir / "train_manifest.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["config"]["embedding_config"], "GloVe")
        self.assertEqual(manifest["config"]["epochs"], 2)

        predictions = run_dir / "predictions.txt"
        code, _, err = run(["predict", "--checkpoint", str(run_dir / "checkpoints" / "last.pt"),
                            "--vocab", str(prepared / "vocab.json"), "--data", str(self.dev_csv),
                            "--out", str(predictions)])
        self.assertEqual(code, 0, err)
        with open(predictions, "r", encoding="utf-8") as f:
            self.assertEqual(len(f.readlines()), 8)

        code, out, err = run(["evaluate", "--gold", str(self.dev_csv), "--predictions", str(predictions),
                              "--out", str(run_dir / "report.json")])
        self.assertEqual(code, 0, err)
        self.assertIn("F1:", out)
        with open(run_dir / "report.json", "r", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["num_posts"], 8)

    def test_gold_predictions_score_one(self):
        prepared = self.prepare()
        predictions = self.root / "gold.txt"
        write_predictions(predictions, [decode_gold(p) for p in load_tokenized(prepared / "train.jsonl")])

        code, out, _ = run(["evaluate", "--gold", str(self.train_csv), "--predictions", str(predictions)])
        self.assertEqual(code, 0)
        self.assertIn("F1: 1.000", out)

    def test_evaluate_misaligned_predictions(self):
        predictions = self.root / "short.txt"
        predictions.write_text("[]\n", encoding="utf-8")
        code, _, err = run(["evaluate", "--gold", str(self.dev_csv), "--predictions", str(predictions)])
        self.assertEqual(code, 1)
        self.assertIn("Error [evaluate]", err)

    def test_unknown_config_key(self):
        prepared = self.prepare()
        run(["embed", "--vocab", str(prepared / "vocab.json"), "--config", "GloVe",
             "--glove", str(self.glove), "--out", str(self.root / "matrix.bin")])
        config = self.root / "config.yaml"
        config.write_text("epochs: 2\nlayers: 3\n", encoding="utf-8")
        code, _, err = run(["train", "--train", str(prepared / "train.jsonl"),
                            "--vocab", str(prepared / "vocab.json"), "--embeddings", str(self.root / "matrix.bin"),
                            "--out-dir", str(self.root / "run"), "--config", str(config)])
        self.assertEqual(code, 1)
        self.assertIn("layers", err)


class TestAblate(PipelineTestCase):

    def ablate(self, *extra):
        return run(["ablate", "--train", str(self.train_csv), "--dev", str(self.dev_csv),
                    "--test", str(self.dev_csv), "--glove", str(self.glove),
                    "--out-dir", str(self.root / "grid")] + TINY_MODEL + list(extra))

    def test_selected_cells(self):
        code, out, err = self.ablate("--only", "BiGRU+Attention:GloVe", "--only", "BiLSTM:GloVe")

        self.assertEqual(code, 0, err)
        self.assertIn("Results on dev set", out)
        self.assertIn("Results on test set", out)
        cells = sorted(p.name for p in (self.root / "grid" / "cells").iterdir())
        self.assertEqual(cells, ["BiGRU+Attention__GloVe", "BiLSTM__GloVe"])
        self.assertTrue((self.root / "grid" / "report.txt").exists())

        with open(self.root / "grid" / "report.json", "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(sorted(report["dev"]), ["BiGRU+Attention:GloVe", "BiLSTM:GloVe"])
        self.assertEqual(report["failures"], {})

    def test_failed_cell_is_marked(self):
        with mock.patch("toxic_spans.cli.train", side_effect=RuntimeError("out of memory")):
            code, out, err = self.ablate("--only", "BiGRU:GloVe")
        self.assertEqual(code, 1)
        self.assertIn("FAIL", out)
        self.assertIn("1 of 1 cells failed", err)

    def test_language_model_cell_uses_stub(self):
        with mock.patch("toxic_spans.cli.load_language_model", side_effect=stub_loader):
            code, _, err = self.ablate("--only", "BiGRU:RG")
        self.assertEqual(code, 0, err)

    def test_missing_glove(self):
        with mock.patch.dict(os.environ, {"TOXIC_SPANS_GLOVE": ""}):
            code, _, err = run(["ablate", "--train", str(self.train_csv), "--dev", str(self.dev_csv),
                                "--out-dir", str(self.root / "grid"), "--only", "BiGRU:GloVe"])
        self.assertEqual(code, 1)
        self.assertIn("TOXIC_SPANS_GLOVE", err)


class TestParseCells(unittest.TestCase):

    def test_full_grid(self):
        cells = parse_cells(None)
        self.assertEqual(len(cells), 28)
        self.assertEqual(cells[0], ("BiLSTM", "GloVe"))
        self.assertEqual(cells[-1], ("BiGRU+Attention", "Ensemble"))

    def test_only(self):
        self.assertEqual(parse_cells(["BiGRU+Attention:Ensemble"]), [("BiGRU+Attention", "Ensemble")])

    def test_unknown_cell(self):
        with self.assertRaises(ValueError):
            parse_cells(["Transformer:Ensemble"])


class TestConfiguration(unittest.TestCase):

    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.yaml")
            with open(path, "w", encoding="utf-8") as f:
                yaml.safe_dump({"epochs": 3, "batch_size": 8}, f)
            args = argparse.Namespace(config=path, epochs=5, batch_size=None, attention=False)
            config = resolve_model_config(args)

        self.assertEqual(config.epochs, 5)
        self.assertEqual(config.batch_size, 8)
        self.assertEqual(config.max_len, 215)
        self.assertFalse(config.attention)

    def test_normalize_scores_is_opt_in(self):
        self.assertFalse(resolve_model_config(argparse.Namespace(normalize_scores=None)).normalize_scores)
        self.assertTrue(resolve_model_config(argparse.Namespace(normalize_scores=True)).normalize_scores)

    def test_hub_settings(self):
        env = {"TOXIC_SPANS_HUB_CACHE": "/models", "TOXIC_SPANS_OFFLINE": "True"}
        with mock.patch.dict(os.environ, env):
            settings = get_hub_settings()
        self.assertEqual(settings["cache_dir"], "/models")
        self.assertTrue(settings["local_files_only"])

    def test_json_serializer(self):
        data = {"when": datetime.datetime(2024, 1, 2), "path": Path("a/b"), "n": np.int64(3), "s": {2, 1}}
        self.assertEqual(json.loads(json.dumps(data, default=json_serializer)),
                         {"when": "2024-01-02T00:00:00", "path": "a/b", "n": 3, "s": [1, 2]})


if __name__ == "__main__":
    unittest.main()
