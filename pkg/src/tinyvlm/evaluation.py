"""Evaluation harness: prompt templates, per-benchmark resize policies, and
the three scoring metrics (ANLS, VQA consensus accuracy, MCQ letter match).

The open-ended templates are reproduced byte-for-byte (golden-file tested);
generations are expected to come from greedy decoding with the standard stop
words. ANLS uses threshold 0.5 and lowercase+trim normalization only, ANLS
predictions score against the best reference. VQA accuracy applies the
canonical normalization tables (articles, punctuation, number words,
contractions) before the min(matches/3, 1) consensus formula.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Callable, Literal

from .image import RawImage, read_image, resize_longest_side
from .kernels import levenshtein

TEXTVQA_PROMPT = (
    "Answer the following question about the image using as few words as possible. "
    "Follow these additional instructions:\n"
    "-Always answer a binary question with Yes or No.\n"
    "-When asked what time it is, reply with the time seen in the image.\n"
    "-Do not put any full stops at the end of the answer.\n"
    "-Do not put quotation marks around the answer.\n"
    "-An answer with one or two words is favorable.\n"
    "-Do not apply common sense knowledge. The answer can be found in the image.\n"
    "Question: {question}"
)

DOCVQA_PROMPT = (
    "Give a short and terse answer to the following question. "
    "Do not paraphrase or reformat the text you see in the image. "
    "Do not include any full stops. "
    "Just give the answer without additional explanation.\n"
    "Question: {question}"
)


def format_textvqa_prompt(question: str) -> str:
    return TEXTVQA_PROMPT.replace("{question}", question, 1)


def format_docvqa_prompt(question: str) -> str:
    return DOCVQA_PROMPT.replace("{question}", question, 1)


@dataclass
class EvalExample:
    question: str
    image: RawImage | str | None = None
    references: list[str] = field(default_factory=list)
    choices: list[str] | None = None
    answer_letter: str | None = None


def format_mcq_prompt(ex: EvalExample) -> str:
    """Question, lettered choices in order, then the answer instruction."""
    if not ex.choices:
        raise ValueError("mcq prompt needs at least one choice")
    if len(ex.choices) > 26:
        raise ValueError(f"mcq prompt supports at most 26 choices, got {len(ex.choices)}")
    lines = [f"Question: {ex.question}", "Choices:"]
    for i, choice in enumerate(ex.choices):
        lines.append(f"{chr(ord('A') + i)}. {choice}")
    lines.append("Answer with the letter.")
    return "\n".join(lines)


def anls(prediction: str, references: list[str], tau: float = 0.5) -> float:
    """Best normalized Levenshtein similarity over the references, zeroed
    below the tau threshold. Normalization is lowercase + trim only."""
    if not references:
        raise ValueError("anls needs at least one reference")
    if not 0 <= tau < 1:
        raise ValueError(f"anls threshold must be in [0, 1), got {tau}")
    p = prediction.lower().strip()
    best = 0.0
    for ref in references:
        r = ref.lower().strip()
        longest = max(len(p), len(r))
        sim = 1.0 if longest == 0 else 1.0 - levenshtein(p, r) / longest
        best = max(best, sim)
    return best if best >= tau else 0.0


# canonical VQA normalization tables
_VQA_CONTRACTIONS = {
    "aint": "ain't", "arent": "aren't", "cant": "can't", "couldve": "could've",
    "couldnt": "couldn't", "couldn'tve": "couldn't've", "couldnt've": "couldn't've",
    "didnt": "didn't", "doesnt": "doesn't", "dont": "don't", "hadnt": "hadn't",
    "hadnt've": "hadn't've", "hadn'tve": "hadn't've", "hasnt": "hasn't",
    "havent": "haven't", "hed": "he'd", "hed've": "he'd've", "he'dve": "he'd've",
    "hes": "he's", "howd": "how'd", "howll": "how'll", "hows": "how's",
    "Id've": "I'd've", "I'dve": "I'd've", "Im": "I'm", "Ive": "I've",
    "isnt": "isn't", "itd": "it'd", "itd've": "it'd've", "it'dve": "it'd've",
    "itll": "it'll", "let's": "let's", "maam": "ma'am", "mightnt": "mightn't",
    "mightnt've": "mightn't've", "mightn'tve": "mightn't've", "mightve": "might've",
    "mustnt": "mustn't", "mustve": "must've", "neednt": "needn't",
    "notve": "not've", "oclock": "o'clock", "oughtnt": "oughtn't",
    "ow's'at": "'ow's'at", "'ows'at": "'ow's'at", "'ow'sat": "'ow's'at",
    "shant": "shan't", "shed've": "she'd've", "she'dve": "she'd've",
    "she's": "she's", "shouldve": "should've", "shouldnt": "shouldn't",
    "shouldnt've": "shouldn't've", "shouldn'tve": "shouldn't've",
    "somebody'd": "somebodyd", "somebodyd've": "somebody'd've",
    "somebody'dve": "somebody'd've", "somebodyll": "somebody'll",
    "somebodys": "somebody's", "someoned": "someone'd",
    "someoned've": "someone'd've", "someone'dve": "someone'd've",
    "someonell": "someone'll", "someones": "someone's", "somethingd": "something'd",
    "somethingd've": "something'd've", "something'dve": "something'd've",
    "somethingll": "something'll", "thats": "that's", "thered": "there'd",
    "thered've": "there'd've", "there'dve": "there'd've", "therere": "there're",
    "theres": "there's", "theyd": "they'd", "theyd've": "they'd've",
    "they'dve": "they'd've", "theyll": "they'll", "theyre": "they're",
    "theyve": "they've", "twas": "'twas", "wasnt": "wasn't",
    "wed've": "we'd've", "we'dve": "we'd've", "weve": "we've", "werent": "weren't",
    "whatll": "what'll", "whatre": "what're", "whats": "what's",
    "whatve": "what've", "whens": "when's", "whered": "where'd",
    "wheres": "where's", "whereve": "where've", "whod": "who'd",
    "whod've": "who'd've", "who'dve": "who'd've", "wholl": "who'll",
    "whos": "who's", "whove": "who've", "whyll": "why'll", "whyre": "why're",
    "whys": "why's", "wont": "won't", "wouldve": "would've",
    "wouldnt": "wouldn't", "wouldnt've": "wouldn't've", "wouldn'tve": "wouldn't've",
    "yall": "y'all", "yall'll": "y'all'll", "y'allll": "y'all'll",
    "yall'd've": "y'all'd've", "y'alld've": "y'all'd've", "y'all'dve": "y'all'd've",
    "youd": "you'd", "youd've": "you'd've", "you'dve": "you'd've",
    "youll": "you'll", "youre": "you're", "youve": "you've",
}
_VQA_NUMBER_WORDS = {
    "none": "0", "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10",
}
_VQA_ARTICLES = {"a", "an", "the"}
_VQA_PUNCT = list(";/[]\"{}()=+\\_-><@`,?!")
_COMMA_STRIP = re.compile(r"(\d)(,)(\d)")
_PERIOD_STRIP = re.compile(r"\.(?!\d)|(?<!\d)\.")  # keep decimal points only


def normalize_vqa_answer(answer: str) -> str:
    """Canonical VQA normalization: punctuation stripping (decimal points
    survive), number-word mapping, article removal, contraction repair."""
    out = answer.replace("\n", " ").replace("\t", " ").strip().lower()
    for p in _VQA_PUNCT:
        if p + " " in out or " " + p in out or re.search(_COMMA_STRIP, out) is not None:
            out = out.replace(p, "")
        else:
            out = out.replace(p, " ")
    out = _PERIOD_STRIP.sub("", out)
    words = []
    for word in out.split():
        word = _VQA_NUMBER_WORDS.get(word, word)
        if word in _VQA_ARTICLES:
            continue
        words.append(_VQA_CONTRACTIONS.get(word, word))
    return " ".join(words)


def vqa_accuracy(prediction: str, references: list[str]) -> float:
    """Consensus score: min(matching annotators / 3, 1) after normalization."""
    if not references:
        raise ValueError("vqa_accuracy needs at least one reference")
    pred = normalize_vqa_answer(prediction)
    matches = sum(1 for r in references if normalize_vqa_answer(r) == pred)
    return min(matches / 3.0, 1.0)


_STANDALONE_LETTER = re.compile(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9])")


def mcq_extract_letter(generation: str, n_choices: int) -> str | None:
    """First standalone letter in A..(A+n-1), tolerant of "B.", "(B)", "b"."""
    if n_choices < 2:
        raise ValueError(f"mcq needs at least 2 choices, got {n_choices}")
    valid = {chr(ord("A") + i) for i in range(n_choices)}
    for m in _STANDALONE_LETTER.finditer(generation):
        letter = m.group(1).upper()
        if letter in valid:
            return letter
    return None


@dataclass
class BenchmarkSpec:
    name: str
    task_kind: Literal["open_ended", "mcq"]
    prompt_template: Literal["textvqa", "docvqa", "mcq"]
    resize_longest: int
    metric: Literal["anls", "vqa_acc", "exact_letter"]
    anls_tau: float = 0.5
    tile_side: int = 364

    def __post_init__(self) -> None:
        if self.resize_longest <= 0 or self.resize_longest % self.tile_side:
            raise ValueError(
                f"{self.name}: resize policy {self.resize_longest} must be a "
                f"positive multiple of the tile side {self.tile_side}"
            )


TEXTVQA_SPEC = BenchmarkSpec("textvqa", "open_ended", "textvqa", 4 * 364, "vqa_acc")
DOCVQA_SPEC = BenchmarkSpec("docvqa", "open_ended", "docvqa", 5 * 364, "anls")
MCQ_SPEC = BenchmarkSpec("mcq", "mcq", "mcq", 4 * 364, "exact_letter")

BUILTIN_SPECS = {s.name: s for s in (TEXTVQA_SPEC, DOCVQA_SPEC, MCQ_SPEC)}


@dataclass
class MetricResult:
    per_example: list[float]
    errors: int = 0

    @property
    def count(self) -> int:
        return len(self.per_example)

    @property
    def aggregate(self) -> float:
        return fmean(self.per_example) if self.per_example else 0.0


def format_prompt(spec: BenchmarkSpec, ex: EvalExample) -> str:
    if spec.prompt_template == "textvqa":
        return format_textvqa_prompt(ex.question)
    if spec.prompt_template == "docvqa":
        return format_docvqa_prompt(ex.question)
    return format_mcq_prompt(ex)


def score_generation(spec: BenchmarkSpec, ex: EvalExample, generation: str) -> float:
    if spec.metric == "anls":
        return anls(generation, ex.references, spec.anls_tau)
    if spec.metric == "vqa_acc":
        return vqa_accuracy(generation, ex.references)
    letter = mcq_extract_letter(generation, len(ex.choices or ()))
    return 1.0 if letter is not None and letter == ex.answer_letter else 0.0


Runner = Callable[[RawImage | None, str], str]


def run_benchmark(
    spec: BenchmarkSpec,
    examples: list[EvalExample],
    runner: Runner,
    *,
    resize_override: int | None = None,
    per_example_path: str | Path | None = None,
) -> MetricResult:
    """Resize each image to the benchmark's longest-side policy, format the
    prompt, collect the runner's generation, and score it. Missing images
    skip the example and count in the errors tally."""
    target = resize_override if resize_override is not None else spec.resize_longest
    result = MetricResult(per_example=[])
    rows: list[dict] = []
    for i, ex in enumerate(examples):
        image: RawImage | None = None
        if ex.image is not None:
            try:
                raw = ex.image if isinstance(ex.image, RawImage) else read_image(ex.image)
            except (OSError, ValueError):
                result.errors += 1
                continue
            image = resize_longest_side(raw, target)
        generation = runner(image, format_prompt(spec, ex))
        score = score_generation(spec, ex, generation)
        result.per_example.append(score)
        rows.append(
            {"index": i, "question": ex.question, "generation": generation, "score": score}
        )
    if per_example_path is not None:
        with open(per_example_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return result


def load_benchmark_file(path: str | Path) -> list[EvalExample]:
    """JSON lines: {"image", "question", "references"} or
    {"image", "question", "choices", "answer_letter"}."""
    out: list[EvalExample] = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            image = obj.get("image")
            if image is not None and not Path(image).is_absolute():
                image = str(base / image)
            ex = EvalExample(
                question=obj["question"],
                image=image,
                references=list(obj.get("references", [])),
                choices=obj.get("choices"),
                answer_letter=obj.get("answer_letter"),
            )
            if ex.choices is None and not ex.references:
                raise ValueError(f"{path}:{line_no}: open-ended example needs references")
            if ex.choices is not None:
                if not (2 <= len(ex.choices) <= 26) or not ex.answer_letter:
                    raise ValueError(f"{path}:{line_no}: mcq example needs 2-26 choices and an answer letter")
            out.append(ex)
    return out


def summary_table(results: dict[str, MetricResult]) -> str:
    """Fixed-width textual summary."""
    lines = [f"{'benchmark':<16}{'metric count':>14}{'errors':>8}{'score':>10}"]
    for name, res in results.items():
        lines.append(f"{name:<16}{res.count:>14}{res.errors:>8}{res.aggregate:>10.4f}")
    return "\n".join(lines)
