import functools
import itertools
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyvlm.evaluation import (
    DOCVQA_SPEC,
    MCQ_SPEC,
    TEXTVQA_SPEC,
    BenchmarkSpec,
    EvalExample,
    MetricResult,
    anls,
    format_docvqa_prompt,
    format_mcq_prompt,
    format_textvqa_prompt,
    load_benchmark_file,
    mcq_extract_letter,
    normalize_vqa_answer,
    run_benchmark,
    summary_table,
    vqa_accuracy,
)
from tinyvlm.image import RawImage, write_ppm

GOLDEN = Path(__file__).parent / "golden"


def edit_distance_oracle(a: str, b: str) -> int:
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def anls_oracle(pred: str, refs: list[str], tau: float = 0.5) -> float:
    best = 0.0
    p = pred.lower().strip()
    for ref in refs:
        r = ref.lower().strip()
        longest = max(len(p), len(r))
        sim = 1.0 if longest == 0 else 1.0 - edit_distance_oracle(p, r) / longest
        best = max(best, sim)
    return best if best >= tau else 0.0


class TestPromptTemplates:
    def test_textvqa_golden_byte_exact(self):
        template = (GOLDEN / "textvqa_prompt.txt").read_text(encoding="utf-8")
        assert format_textvqa_prompt("What time is it?") == template.replace(
            "{question}", "What time is it?"
        )

    def test_docvqa_golden_byte_exact(self):
        template = (GOLDEN / "docvqa_prompt.txt").read_text(encoding="utf-8")
        assert format_docvqa_prompt("Total amount?") == template.replace(
            "{question}", "Total amount?"
        )

    def test_mcq_golden_byte_exact(self):
        template = (GOLDEN / "mcq_prompt.txt").read_text(encoding="utf-8")
        ex = EvalExample(
            question="Which is a fruit?",
            choices=["rock", "apple", "chair", "cloud"],
            answer_letter="B",
        )
        rendered = (
            template.replace("{question}", "Which is a fruit?")
            .replace("{choice_a}", "rock")
            .replace("{choice_b}", "apple")
            .replace("{choice_c}", "chair")
            .replace("{choice_d}", "cloud")
        )
        assert format_mcq_prompt(ex) == rendered

    def test_mcq_two_choices(self):
        ex = EvalExample(question="q", choices=["x", "y"], answer_letter="A")
        prompt = format_mcq_prompt(ex)
        assert "A. x\nB. y\nAnswer with the letter." in prompt
        assert "C." not in prompt

    def test_mcq_empty_choices_rejected(self):
        with pytest.raises(ValueError):
            format_mcq_prompt(EvalExample(question="q", choices=[]))

    def test_mcq_over_26_rejected(self):
        with pytest.raises(ValueError, match="26"):
            format_mcq_prompt(EvalExample(question="q", choices=["c"] * 27))

    def test_empty_question_is_callers_problem(self):
        assert format_docvqa_prompt("").endswith("Question: ")


class TestAnls:
    def test_case_folded_exact_match(self):
        assert anls("Paris", ["paris"]) == 1.0

    def test_hello_hallo_is_point_eight(self):
        assert anls("hello", ["hallo"], tau=0.5) == pytest.approx(0.8)

    def test_below_threshold_zeroed(self):
        assert anls("abc", ["xyz"], tau=0.5) == 0.0

    def test_empty_reference_list_rejected(self):
        with pytest.raises(ValueError, match="reference"):
            anls("x", [])

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            anls("x", ["x"], tau=1.0)

    def test_multi_reference_takes_max(self):
        assert anls("hello", ["zzzzz", "hallo"], tau=0.0) == pytest.approx(0.8)

    def test_exhaustive_short_strings_match_oracle(self):
        alphabet = "ab"
        strings = [""] + [
            "".join(p)
            for n in range(1, 5)
            for p in itertools.product(alphabet, repeat=n)
        ]
        for p in strings:
            for r in strings:
                assert anls(p, [r], tau=0.0) == pytest.approx(anls_oracle(p, [r], 0.0))

    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=8), st.text(min_size=1, max_size=8))
    def test_random_pairs_match_oracle(self, pred, ref):
        assert anls(pred, [ref], tau=0.0) == pytest.approx(anls_oracle(pred, [ref], 0.0))

    def test_equals_one_iff_normalized_equal(self):
        assert anls(" Paris ", ["paris"]) == 1.0
        assert anls("pariss", ["paris"]) < 1.0

    def test_symmetry_of_distance(self):
        for a, b in [("abc", "abd"), ("kitten", "sitting"), ("", "xy")]:
            assert anls(a, [b], tau=0.0) == pytest.approx(anls(b, [a], tau=0.0))


class TestVqaAccuracy:
    def test_all_ten_match(self):
        assert vqa_accuracy("yes", ["yes"] * 10) == 1.0

    def test_two_matches_gives_two_thirds(self):
        refs = ["yes", "yes"] + ["no"] * 8
        assert vqa_accuracy("yes", refs) == pytest.approx(2 / 3)

    def test_zero_matches(self):
        assert vqa_accuracy("cat", ["dog"] * 10) == 0.0

    @pytest.mark.parametrize("k,expected", [(0, 0.0), (1, 1 / 3), (2, 2 / 3), (3, 1.0), (10, 1.0)])
    def test_formula_cases(self, k, expected):
        refs = ["match"] * k + ["other"] * (10 - k)
        assert vqa_accuracy("match", refs) == pytest.approx(expected)

    def test_monotone_in_matches(self):
        scores = [
            vqa_accuracy("x", ["x"] * k + ["y"] * (10 - k)) for k in range(11)
        ]
        assert scores == sorted(scores)

    def test_empty_references_rejected(self):
        with pytest.raises(ValueError):
            vqa_accuracy("x", [])

    def test_normalization_rules(self):
        assert normalize_vqa_answer("The dog") == "dog"
        assert normalize_vqa_answer("two") == "2"
        assert normalize_vqa_answer("Yes!") == "yes"
        assert normalize_vqa_answer("it's 3.5") == "it's 3.5"
        assert normalize_vqa_answer("dont") == "don't"
        assert vqa_accuracy("2 dogs", ["two dogs"] * 3) == 1.0


class TestMcqExtractLetter:
    def test_leading_letter_with_period(self):
        assert mcq_extract_letter("B. The chart shows growth", 4) == "B"

    def test_parenthesized_lowercase(self):
        assert mcq_extract_letter("The answer is (c)", 4) == "C"

    def test_no_letter(self):
        assert mcq_extract_letter("No idea", 4) is None

    def test_out_of_range_letter_ignored(self):
        assert mcq_extract_letter("Z is my answer, but B fits", 4) == "B"

    def test_first_valid_letter_wins(self):
        assert mcq_extract_letter("A or B", 4) == "A"

    def test_letters_inside_words_ignored(self):
        assert mcq_extract_letter("cab dab", 4) is None

    def test_needs_two_choices(self):
        with pytest.raises(ValueError):
            mcq_extract_letter("A", 1)


class TestBenchmarkSpecs:
    def test_resize_policies_match_tile_multiples(self):
        assert TEXTVQA_SPEC.resize_longest == 1456  # 4 x 364
        assert DOCVQA_SPEC.resize_longest == 1820  # 5 x 364
        assert MCQ_SPEC.resize_longest == 1456

    def test_non_multiple_rejected(self):
        with pytest.raises(ValueError, match="multiple"):
            BenchmarkSpec("bad", "open_ended", "docvqa", 1000, "anls")


class TestRunBenchmark:
    def examples(self):
        return [
            EvalExample(question="q1", references=["alpha"]),
            EvalExample(question="q2", references=["beta"]),
        ]

    def test_echo_reference_runner_scores_one(self):
        refs = iter(["alpha", "beta"])
        spec = BenchmarkSpec("docvqa", "open_ended", "docvqa", 1820, "anls")
        result = run_benchmark(spec, self.examples(), lambda img, prompt: next(refs))
        assert result.aggregate == 1.0
        assert result.count == 2

    def test_resize_applied_per_spec(self, rng):
        sizes = []

        def runner(img, prompt):
            sizes.append((img.width, img.height))
            return "alpha"

        img = RawImage(rng.random((100, 50, 3)))
        ex = [EvalExample(question="q", image=img, references=["alpha"])]
        run_benchmark(DOCVQA_SPEC, ex, runner)
        run_benchmark(TEXTVQA_SPEC, ex, runner)
        assert sizes == [(910, 1820), (728, 1456)]

    def test_missing_image_skipped_and_counted(self, tmp_path):
        ex = [
            EvalExample(question="q", image=str(tmp_path / "nope.png"), references=["alpha"]),
            EvalExample(question="q2", references=["beta"]),
        ]
        spec = BenchmarkSpec("docvqa", "open_ended", "docvqa", 1820, "anls")
        result = run_benchmark(spec, ex, lambda img, prompt: "beta")
        assert result.errors == 1
        assert result.count == 1

    def test_aggregate_is_exact_mean(self):
        gens = iter(["alpha", "wrong"])
        spec = BenchmarkSpec("docvqa", "open_ended", "docvqa", 1820, "anls")
        result = run_benchmark(spec, self.examples(), lambda img, prompt: next(gens))
        assert result.aggregate == (result.per_example[0] + result.per_example[1]) / 2

    def test_per_example_jsonl(self, tmp_path):
        spec = BenchmarkSpec("docvqa", "open_ended", "docvqa", 1820, "anls")
        out = tmp_path / "per.jsonl"
        run_benchmark(spec, self.examples(), lambda img, prompt: "alpha", per_example_path=out)
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 2 and rows[0]["score"] == 1.0

    def test_mcq_scoring(self):
        ex = [EvalExample(question="q", choices=["x", "y"], answer_letter="B")]
        result = run_benchmark(MCQ_SPEC, ex, lambda img, prompt: "B.")
        assert result.aggregate == 1.0

    def test_load_benchmark_file(self, tmp_path, rng):
        img = RawImage(rng.random((8, 8, 3)))
        write_ppm(img, tmp_path / "img.ppm")
        rows = [
            {"image": "img.ppm", "question": "open?", "references": ["yes"]},
            {"question": "pick", "choices": ["a", "b"], "answer_letter": "A"},
        ]
        p = tmp_path / "bench.jsonl"
        p.write_text("\n".join(json.dumps(r) for r in rows))
        examples = load_benchmark_file(p)
        assert examples[0].image.endswith("img.ppm")
        assert examples[1].choices == ["a", "b"]

    def test_summary_table_format(self):
        table = summary_table({"docvqa": MetricResult(per_example=[1.0, 0.5], errors=1)})
        assert "docvqa" in table and "0.7500" in table
