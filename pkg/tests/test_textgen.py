import json

import numpy as np
import pytest

from modapt import textgen
from modapt.dataio import InvalidConfigError, LabelVocab, multihot
from modapt.numkit import RandomSource


@pytest.fixture
def vocab20():
    return LabelVocab(tuple(f"w{i}" for i in range(20)))


class TestSampleCombination:
    def test_forced_single_label(self, vocab20):
        combo = textgen.sample_combination(RandomSource(0), vocab20, 1, 1)
        assert combo.sum() == 1

    def test_forced_full_set(self):
        vocab = LabelVocab(("a", "b", "c"))
        combo = textgen.sample_combination(RandomSource(0), vocab, 3, 3)
        assert combo.sum() == 3

    def test_size_distribution_uniform(self, vocab20):
        rng = RandomSource(42)
        counts = np.zeros(5)
        draws = 10_000
        for _ in range(draws):
            counts[int(textgen.sample_combination(rng, vocab20, 1, 4).sum())] += 1
        for k in (1, 2, 3, 4):
            assert abs(counts[k] / draws - 0.25) < 0.02

    def test_max_k_exceeding_vocab(self, vocab20):
        with pytest.raises(InvalidConfigError):
            textgen.sample_combination(RandomSource(0), vocab20, 1, 21)

    def test_deterministic(self, vocab20):
        a = textgen.sample_combination(RandomSource(5), vocab20, 2, 4)
        b = textgen.sample_combination(RandomSource(5), vocab20, 2, 4)
        np.testing.assert_array_equal(a, b)


class TestRenderText:
    def test_single_label_prompt(self):
        vocab = LabelVocab(("dog", "cat"))
        out = textgen.render_text("there are {} in the photo.", multihot([0], 2), vocab)
        assert out == "there are dog in the photo."

    def test_two_labels_join_with_and(self):
        vocab = LabelVocab(("dog", "cat"))
        out = textgen.render_text("there are {} in the photo.", multihot([0, 1], 2), vocab)
        assert out == "there are dog and cat in the photo."

    def test_three_labels_comma_then_and(self):
        vocab = LabelVocab(("a", "b", "c"))
        out = textgen.render_text("a photo of {}.", multihot([0, 1, 2], 3), vocab)
        assert out == "a photo of a, b and c."

    def test_instruction_template(self):
        vocab = LabelVocab(("person", "bicycle"))
        out = textgen.render_text(
            textgen.INSTRUCTION_TEMPLATES["instruction_1"], multihot([0, 1], 2), vocab
        )
        assert out == "Please briefly caption an image that contains person and bicycle."

    def test_empty_combination_rejected(self):
        vocab = LabelVocab(("a",))
        with pytest.raises(InvalidConfigError):
            textgen.render_text("x {}", multihot([], 1), vocab)

    def test_pure_function(self):
        vocab = LabelVocab(("a", "b"))
        args = ("an image showing {}.", multihot([1], 2), vocab)
        assert textgen.render_text(*args) == textgen.render_text(*args)


class TestPromptTexts:
    def test_supervision_is_exact(self, vocab20):
        records = textgen.generate_prompt_texts(RandomSource(1), vocab20, 50)
        assert len(records) == 50
        for r in records:
            assert r.labels
            for j in r.labels:
                assert vocab20.names[j] in r.text

    def test_deterministic(self, vocab20):
        a = textgen.generate_prompt_texts(RandomSource(2), vocab20, 10)
        b = textgen.generate_prompt_texts(RandomSource(2), vocab20, 10)
        assert a == b

    def test_fixed_template_index(self, vocab20):
        records = textgen.generate_prompt_texts(RandomSource(0), vocab20, 5, template_index=0)
        assert all(r.text.startswith("there are ") for r in records)

    def test_zero_count_rejected(self, vocab20):
        with pytest.raises(InvalidConfigError):
            textgen.generate_prompt_texts(RandomSource(0), vocab20, 0)


class TestInstructions:
    def test_emit_contains_labels_and_meta(self, tmp_path, vocab20):
        path = tmp_path / "instructions.jsonl"
        records = textgen.emit_instructions(RandomSource(0), vocab20, 5, "instruction_1", 1, 3, path)
        assert len(records) == 5
        lines = path.read_text(encoding="utf-8").strip().split("\n")
        assert len(lines) == 6
        meta = json.loads(lines[0])
        assert meta["refinement_instructions"] == list(textgen.REFINEMENT_INSTRUCTIONS)
        assert meta["vocab_hash"] == vocab20.hash
        for line in lines[1:]:
            obj = json.loads(line)
            for j in obj["labels"]:
                assert vocab20.names[j] in obj["instruction"]

    def test_emit_deterministic(self, tmp_path, vocab20):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        textgen.emit_instructions(RandomSource(3), vocab20, 7, "instruction_2", 1, 4, p1)
        textgen.emit_instructions(RandomSource(3), vocab20, 7, "instruction_2", 1, 4, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_count_rejected(self, tmp_path, vocab20):
        with pytest.raises(InvalidConfigError):
            textgen.emit_instructions(RandomSource(0), vocab20, 0, "instruction_1", 1, 2, tmp_path / "x.jsonl")

    def test_read_round_trip(self, tmp_path, vocab20):
        path = tmp_path / "instructions.jsonl"
        records = textgen.emit_instructions(RandomSource(1), vocab20, 4, "instruction_1", 1, 2, path)
        meta, loaded = textgen.read_instructions(path)
        assert meta["template"] == "instruction_1"
        assert loaded == records


class TestIngestResponses:
    def write_files(self, tmp_path, vocab, responses):
        inst_path = tmp_path / "instructions.jsonl"
        textgen.emit_instructions(RandomSource(0), vocab, 3, "instruction_1", 1, 2, inst_path)
        resp_path = tmp_path / "responses.jsonl"
        with open(resp_path, "w", encoding="utf-8") as f:
            for rid, text in responses:
                f.write(json.dumps({"id": rid, "text": text}) + "\n")
        return inst_path, resp_path

    def test_join_identity(self, tmp_path, vocab20):
        responses = [(f"inst-{i:06d}", f"caption {i}") for i in range(3)]
        inst, resp = self.write_files(tmp_path, vocab20, responses)
        records, report = textgen.ingest_responses(inst, resp)
        assert report.n_ingested == 3
        _, instructions = textgen.read_instructions(inst)
        for rec, ins in zip(records, instructions):
            assert rec.id == ins.id and rec.labels == ins.labels

    def test_orphan_id_error(self, tmp_path, vocab20):
        inst, resp = self.write_files(tmp_path, vocab20, [("inst-999999", "hi")])
        with pytest.raises(textgen.OrphanResponseError, match="inst-999999"):
            textgen.ingest_responses(inst, resp)

    def test_overlong_dropped_with_count(self, tmp_path, vocab20):
        responses = [("inst-000000", "x" * 5000), ("inst-000001", "short caption")]
        inst, resp = self.write_files(tmp_path, vocab20, responses)
        records, report = textgen.ingest_responses(inst, resp, max_chars=300)
        assert report.n_dropped_too_long == 1
        assert [r.id for r in records] == ["inst-000001"]

    def test_empty_skipped_with_count(self, tmp_path, vocab20):
        responses = [("inst-000000", "   "), ("inst-000001", "fine")]
        inst, resp = self.write_files(tmp_path, vocab20, responses)
        records, report = textgen.ingest_responses(inst, resp)
        assert report.n_skipped_empty == 1
        assert len(records) == 1
