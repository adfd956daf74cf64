"""Prompt template loading and rendering.

Templates live as plain text files under ``conquer/prompts/``. Rendering
replaces only the named placeholders so literal braces elsewhere in a
template (e.g. JSON schema examples) survive untouched.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

TEMPLATE_NAMES = (
    "baseline",
    "conquer",
    "concepts",
    "summary",
    "judge",
    "pairwise",
    "difficulty",
    "dataset",
)

# Fixed header sentences, used by the mock backend to recognize which
# template produced a prompt.
MARKER_QUIZ = "You are a quiz generator."
MARKER_QUIZ_WITH_CONTEXT = "You have access to summarized reference information"
MARKER_CONCEPTS = "Extract the key concepts a student must understand"
MARKER_SUMMARY = "Summarize the reference passages below"
MARKER_JUDGE = "evaluate the educational quality of the quiz set"
MARKER_PAIRWISE = "select the quiz set that performs better by outputting 1 or 2"
MARKER_DIFFICULTY = "Assess the reasoning difficulty and knowledge depth"
MARKER_DATASET = "helping assemble a dataset of student questions"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    return resources.files("conquer").joinpath(f"prompts/{name}.txt").read_text("utf-8")


def render(template: str, **values: str) -> str:
    """Fill ``{name}`` placeholders; placeholders not in ``values`` are kept."""
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", str(value))
    return out


def render_template(name: str, **values: str) -> str:
    return render(load_template(name), **values)
