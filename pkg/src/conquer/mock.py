"""Deterministic mock LLM backend for hermetic runs.

The mock recognizes each prompt template by its fixed header sentence and
emits schema-valid output derived from a seeded digest of the prompt, so a
fixed seed yields byte-identical pipeline output across processes. Output
quality tracks input richness: prompts carrying more reference material
produce quiz sets with more distinct content words, and the mock judge
prefers the richer set.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from . import prompts
from .gateway import ChatRequest

EMBEDDING_DIM = 64

_WORD_RE = re.compile(r"[A-Za-z0-9]+")

# Scaffolding words excluded when measuring substance.
_SKIP_WORDS = frozenset(
    """
    the and for that this with what when where why how does are was were has
    have had can will its his her their they them from into about not but all
    any each more most some such than too very you your which level student
    question studying quiz term tied most closely option answer following
    """.split()
)

_FILLER_WORDS = ("meridian", "lattice", "pendulum", "archive")

_TOPIC_WORDS = (
    "energy", "structure", "evolution", "measurement", "symmetry",
    "equilibrium", "inference", "probability", "causation", "adaptation",
    "momentum", "diffusion", "resonance", "catalysis", "heredity",
    "cognition", "perception", "institutions", "trade", "elasticity",
    "computation", "algorithms", "networks", "entropy", "gravity",
    "immunity", "metabolism", "ecosystems", "erosion", "climate",
    "harmony", "rhythm", "justice", "contracts", "governance",
    "mythology", "rituals", "minerals", "circuits", "proteins",
)

# Concept list the mock replays for the canonical plant question.
_PLANT_CONCEPTS = "plant, sunlight, water, photosynthesis, growth, stress, environment"

_QUESTION_TEMPLATES = {
    "primary school": "What should a beginner know about {topic} when studying {area}?",
    "high school": "How does an understanding of {topic} shape modern applications of {area}?",
    "PhD": "What open research problems surround {topic} in contemporary {area}?",
}


def _digest_int(*parts: str) -> int:
    joined = "\x1f".join(parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


def _content_words(text: str, limit: int | None = None) -> list[str]:
    words = []
    seen = set()
    for match in _WORD_RE.finditer(text.lower()):
        word = match.group()
        if len(word) < 3 or word in _SKIP_WORDS or word in seen:
            continue
        seen.add(word)
        words.append(word)
        if limit is not None and len(words) >= limit:
            break
    return words


def _cap_tokens(text: str, limit: int) -> str:
    if len(text.split()) <= limit:
        return text
    out_lines: list[str] = []
    used = 0
    for line in text.splitlines():
        words = line.split()
        if used + len(words) <= limit:
            out_lines.append(line)
            used += len(words)
        else:
            out_lines.append(" ".join(words[: limit - used]))
            break
    return "\n".join(out_lines)


def _extract(pattern: str, text: str, group: int = 1) -> str:
    match = re.search(pattern, text, re.DOTALL)
    return match.group(group).strip() if match else ""


class MockBackend:
    """Seeded stand-in for a chat/embedding provider."""

    def __init__(self, seed: int = 0):
        self.seed = str(seed)

    # -- chat -------------------------------------------------------------

    def complete(self, req: ChatRequest) -> str:
        prompt = req.user_prompt
        if prompts.MARKER_DATASET in prompt:
            text = self._questions(prompt)
        elif prompts.MARKER_CONCEPTS in prompt:
            text = self._concepts(prompt)
        elif prompts.MARKER_SUMMARY in prompt:
            text = self._summary(prompt)
        elif prompts.MARKER_PAIRWISE in prompt:
            text = self._pairwise(prompt)
        elif prompts.MARKER_JUDGE in prompt:
            text = self._judge(prompt)
        elif prompts.MARKER_DIFFICULTY in prompt:
            text = self._difficulty(prompt)
        elif prompts.MARKER_QUIZ in prompt:
            text = self._quizzes(prompt)
        else:
            text = f"mock response {_digest_int(self.seed, 'generic', prompt):016x}"
        return _cap_tokens(text, req.max_output_tokens)

    def _questions(self, prompt: str) -> str:
        area = _extract(r"studying (.+?) at the", prompt)
        level = _extract(r"at the (.+?) level", prompt)
        count = int(_extract(r"Write (\d+) representative questions", prompt) or "5")
        template = _QUESTION_TEMPLATES.get(
            level, "Can you explain {topic} as it relates to {area}?"
        )
        base = _digest_int(self.seed, "dataset", area, level)
        lines = []
        for i in range(count):
            topic = _TOPIC_WORDS[(base + i * 39) % len(_TOPIC_WORDS)]
            lines.append(f"{i + 1}. {template.format(topic=topic, area=area)}")
        return "\n".join(lines)

    def _concepts(self, prompt: str) -> str:
        question = _extract(r"Student Question: (.*)$", prompt)
        lowered = question.lower()
        if "plant" in lowered and "sunlight" in lowered:
            return _PLANT_CONCEPTS
        words = _content_words(question, limit=8)
        return ", ".join(words) if words else "general knowledge"

    def _summary(self, prompt: str) -> str:
        passages = _extract(r"Reference Passages:\n(.*)$", prompt)
        words = _content_words(passages, limit=60)
        if not words:
            return "The reference material restates the question without further detail."
        if len(words) == 1:
            return f"The reference material centers on {words[0]}."
        return (
            "The reference material highlights "
            + ", ".join(words[:-1])
            + f" and {words[-1]}."
        )

    def _quizzes(self, prompt: str) -> str:
        area = _extract(r"studying (.+?) at the", prompt)
        question = _extract(r"Student Question: ([^\n]*)\s*$", prompt)
        context = ""
        if prompts.MARKER_QUIZ_WITH_CONTEXT in prompt:
            context = _extract(
                r"Reference Wikipedia Information:\n(.*)\n\s*Student Question:", prompt
            )
        vocab = _content_words(context) or _content_words(question)
        if not vocab:
            vocab = list(_FILLER_WORDS)
        h = _digest_int(self.seed, "quiz", prompt)
        blocks = []
        for i in range(3):
            anchor = vocab[(h + 3 * i) % len(vocab)]
            rotation = (h + i) % len(vocab)
            candidates = [w for w in vocab[rotation:] + vocab[:rotation] if w != anchor]
            candidates += [w for w in _FILLER_WORDS if w not in candidates]
            options = []
            for word in candidates:
                if word not in options:
                    options.append(word)
                if len(options) == 4:
                    break
            blocks.append(
                "[Quiz]\n"
                f"Quiz: Which term is most closely tied to {anchor} when studying {area}?\n"
                f"A. {options[0]}\n"
                f"B. {options[1]}\n"
                f"C. {options[2]}\n"
                f"D. {options[3]}"
            )
        return "\n\n".join(blocks)

    def _richness(self, text: str) -> int:
        return len(_content_words(text))

    def _judge(self, prompt: str) -> str:
        quiz_text = _extract(
            r"Here is the quiz set related to the question:\n(.*)\n\s*Please start", prompt
        )
        richness = self._richness(quiz_text)
        base = 2 + (richness >= 12) + (richness >= 24)
        scores = {}
        for key in (
            "Educational Value",
            "Diversity",
            "Area Relevance",
            "Difficulty Appropriateness",
            "Comprehensiveness",
        ):
            jitter = _digest_int(self.seed, "judge", key, quiz_text) % 3 - 1
            scores[key] = max(1, min(5, base + jitter))
        lines = ", ".join(f'"{k}": {v}' for k, v in scores.items())
        return (
            f"The quiz set covers {richness} distinct content terms; scoring each "
            "criterion in turn leads to the evaluation below.\n"
            "```json\n{" + lines + "}\n```"
        )

    def _pairwise(self, prompt: str) -> str:
        set_one = _extract(r"Here is the quiz set 1:\n(.*)\nHere is the quiz set 2:", prompt)
        set_two = _extract(r"Here is the quiz set 2:\n(.*)\n\s*Please start", prompt)
        r1, r2 = self._richness(set_one), self._richness(set_two)
        choices = {}
        for key in (
            "Educational Value",
            "Diversity",
            "Area Relevance",
            "Difficulty Appropriateness",
            "Comprehensiveness",
        ):
            if r1 != r2:
                choices[key] = 1 if r1 > r2 else 2
            else:
                choices[key] = _digest_int(self.seed, "pair", key, set_one, set_two) % 2 + 1
        lines = ", ".join(f'"{k}": {v}' for k, v in choices.items())
        return (
            f"Set 1 carries {r1} distinct content terms against {r2} for set 2, "
            "which decides each criterion.\n"
            "```json\n{" + lines + "}\n```"
        )

    def _difficulty(self, prompt: str) -> str:
        question = _extract(r"Student Question: ([^\n]*)", prompt)
        score = 1 + _digest_int(self.seed, "difficulty", question) % 5
        return (
            "Judging the reasoning steps and background knowledge the question "
            f"demands gives the score below.\n```json\n{{\"Difficulty\": {score}}}\n```"
        )

    # -- embeddings -------------------------------------------------------

    def embed(self, texts: list[str], model: str) -> list[list[float]]:
        """Seeded hash-derived unit vectors; identical texts collide exactly."""
        out = []
        for text in texts:
            rng = np.random.default_rng(_digest_int(self.seed, "embed", model, text))
            vec = rng.standard_normal(EMBEDDING_DIM)
            vec /= np.linalg.norm(vec)
            out.append([float(v) for v in vec])
        return out
