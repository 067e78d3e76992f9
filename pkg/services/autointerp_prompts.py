"""
Autointerp Prompt Templates
Versioned explainer / scorer / case-generation prompts

Rendering is a pure function of (template version, examples, seed); golden copies live in data/golden/.
"""
import html

import numpy as np

from schemas.autointerp import MinedExample, PromptDocument
from .errors import ConfigurationError, DatasetError

TEMPLATE_VERSION = "v1"
ROUTED_MARK = "**"


# ============================================================
# Explainer
# ============================================================

EXPLAINER_SYSTEM = """
<role>
You study one expert inside a Mixture-of-Experts language model and describe what it does.
</role>

<task>
Each snippet below is a {window}-token window of text in which this expert was selected for at least one token.
Write one hypothesis, a single sentence of 3 to 12 words, naming the function the expert performs.
</task>

<format>
Every example has two parts:
1. <snippet>: the text itself. Tokens routed to the expert are wrapped in double asterisks, like **this**.
2. <peaks>: up to {n_items} tokens where the expert wrote most strongly, ranked by router weight times output L2 norm.
   - token: the token text
   - score: the contribution score
   - promotes: the {n_promoted} tokens the expert's output pushes up most (Logit Lens)
</format>

<advice>
- Note whether routed tokens are sparse (single words or names) or dense (whole stretches of syntax).
- The promoted tokens show what the expert does to the prediction; use them.
- Describe the pattern shared by most examples rather than one striking case.
- The asterisks only mark routing; read the text without them.
</advice>
""".strip()

EXPLAINER_USER = """
<context>
Top activating examples for expert {layer}/{expert}.
</context>

<data>
{examples}
</data>

<instruction>
Using only the data above, reply with your hypothesis inside <hypothesis></hypothesis> tags.
</instruction>
""".strip()

EXPLAINER_EXAMPLE = """
<example id="{index}">
<snippet>
{snippet}
</snippet>
<peaks>
{items}
</peaks>
</example>
""".strip()

PEAK_ITEM = '<peak token="{token}" score="{score:.2f}" promotes="{promoted}"/>'


# ============================================================
# Scorer
# ============================================================

SCORER_SYSTEM = """
<role>
You check interpretability hypotheses against examples.
</role>

<task>
You receive a hypothesis about one expert of a Mixture-of-Experts model and a numbered list of examples.
In each example the tokens where an expert was active are wrapped in double asterisks, like **this**.
For every example decide whether the marked tokens fit the hypothesis.
- The marked tokens fit the hypothesis: answer 1.
- The marked tokens contradict it or have nothing to do with it: answer 0.
</task>

<rules>
- Judge only against the hypothesis as written.
- The hypothesis has to describe the marked tokens themselves, not just the topic of the surrounding text.
</rules>
""".strip()

SCORER_USER = """
<hypothesis>
{hypothesis}
</hypothesis>

<examples>
{examples}
</examples>

<instruction>
Judge all {n} examples. Reason first, then end your answer with one list of exactly {n} integers (0 or 1) in example order.
</instruction>
""".strip()

SCORER_EXAMPLE = """
<example id="{index}">
<snippet>
{snippet}
</snippet>
</example>
""".strip()

SCORER_REPROMPT = "Your reply did not end with a list of exactly {n} integers. Send only that list, e.g. [1, 0, ...]."


# ============================================================
# Trigger–target case generation
# ============================================================

CASE_GENERATION = """
Write test cases for a label that describes one expert of a Mixture-of-Experts language model.

Label:
"{label}"

Return a JSON array of exactly {n} objects, each shaped like this:
{{
  "text": "a short passage in which the expert should be active",
  "trigger": "a word, subword or run of adjacent words that should be routed to the expert",
  "target": "a word the expert should make more likely, by predicting it directly or by promoting it"
}}

Pick triggers that are very likely to be routed to the expert and targets the expert is clearly responsible for.
Return only the JSON array.
""".strip()


# ============================================================
# Rendering
# ============================================================

def _check_version(template_version: str) -> None:
    if template_version != TEMPLATE_VERSION:
        raise ConfigurationError(f"template version {template_version!r} is not available (have {TEMPLATE_VERSION!r})")


def render_piece(raw: bytes) -> str:
    """Lossless token text: invalid UTF-8 and control characters (other than newline and tab) are escaped."""
    text = raw.decode("utf-8", errors="backslashreplace")
    return "".join(ch if ch.isprintable() or ch in "\n\t" else ch.encode("unicode_escape").decode("ascii") for ch in text)


def render_snippet(example: MinedExample) -> str:
    return "".join(
        f"{ROUTED_MARK}{piece}{ROUTED_MARK}" if routed else piece
        for piece, routed in zip(example.pieces, example.routed)
    )


def _attr(value: str) -> str:
    return html.escape(value, quote=True)


def build_explainer_prompt(examples: list[MinedExample], n_promoted: int = 3, n_items: int = 5,
                           template_version: str = TEMPLATE_VERSION) -> PromptDocument:
    _check_version(template_version)
    if not examples:
        raise DatasetError("explainer prompt needs at least one example")
    blocks = []
    for i, ex in enumerate(examples, start=1):
        items = "\n".join(
            PEAK_ITEM.format(
                token=_attr(item.token),
                score=item.score,
                promoted=_attr(", ".join(item.promoted[:n_promoted])),
            )
            for item in ex.top_items[:n_items]
        )
        blocks.append(EXPLAINER_EXAMPLE.format(index=i, snippet=render_snippet(ex), items=items))
    window = len(examples[0].tokens)
    return PromptDocument(
        template_version=template_version,
        kind="explainer",
        system=EXPLAINER_SYSTEM.format(window=window, n_items=n_items, n_promoted=n_promoted),
        user=EXPLAINER_USER.format(layer=examples[0].layer, expert=examples[0].expert, examples="\n\n".join(blocks)),
    )


def build_scorer_prompt(hypothesis: str, positives: list[MinedExample], negatives: list[MinedExample], seed=0,
                        template_version: str = TEMPLATE_VERSION) -> tuple[PromptDocument, list[int]]:
    """Shuffle positives and negatives with `seed`; returns the prompt and the hidden answer key."""
    _check_version(template_version)
    if not positives or not negatives:
        raise DatasetError(f"scorer prompt needs positives and negatives, got {len(positives)} / {len(negatives)}",
                           n_positive=len(positives), n_negative=len(negatives))
    pool = [(ex, 1) for ex in positives] + [(ex, 0) for ex in negatives]
    order = np.random.default_rng(seed).permutation(len(pool))
    shuffled = [pool[i] for i in order]
    blocks = [SCORER_EXAMPLE.format(index=i, snippet=render_snippet(ex)) for i, (ex, _) in enumerate(shuffled, start=1)]
    prompt = PromptDocument(
        template_version=template_version,
        kind="scorer",
        system=SCORER_SYSTEM,
        user=SCORER_USER.format(hypothesis=hypothesis, examples="\n\n".join(blocks), n=len(shuffled)),
    )
    return prompt, [label for _, label in shuffled]


def build_case_generation_prompt(label: str, n: int = 20, template_version: str = TEMPLATE_VERSION) -> PromptDocument:
    _check_version(template_version)
    return PromptDocument(
        template_version=template_version,
        kind="case_generation",
        system="",
        user=CASE_GENERATION.format(label=label, n=n),
    )
