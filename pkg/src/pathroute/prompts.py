"""Execution-time prompt wrappers, one per coordination path."""

from __future__ import annotations

from .paths import Path

QUERY_PLACEHOLDER = "<benchmark query>"

_PREAMBLE = ("You are a multimodal reasoning model. For this task, you must follow "
             "this EXACT reasoning path:\n\n")
_UNDERSTANDING_DEF = ("- Understanding = Text Understanding: give exactly one sentence that "
                      "directly describes the visible input and the task, without inference\n")
_REASONING_DEF = ("- Reasoning = Text Reasoning: give a short textual reasoning chain using "
                  "only the provided information\n")
_UNDERSTANDING_OUT = ("Understanding:\n(Exactly one sentence directly describing the visible "
                      "input and the task)\n\n")
_REASONING_OUT = "Reasoning:\n(A short textual reasoning chain)\n\n"
_CLOSING = ("Now solve the following query using ONLY this path ({chain}):\n\n"
            "Query:\n" + QUERY_PLACEHOLDER)


def _template(chain: str, definitions: str, output_format: str) -> str:
    return (_PREAMBLE + chain + "\n\nWhere:\n" + definitions + "\nOutput format:\n\n"
            + output_format + _CLOSING.format(chain=chain))


TEMPLATES: dict[Path, str] = {
    Path.A: QUERY_PLACEHOLDER,
    Path.U: _template(
        "Understanding -> Answer",
        _UNDERSTANDING_DEF
        + "- Answer = Final Answer: answer directly from perception only\n",
        _UNDERSTANDING_OUT
        + "Answer:\n(Direct answer based only on what is explicitly visible or stated)\n\n",
    ),
    Path.R: _template(
        "Understanding -> Reasoning -> Answer",
        _UNDERSTANDING_DEF + _REASONING_DEF
        + "- Answer = Final Answer: answer directly and concisely\n",
        _UNDERSTANDING_OUT + _REASONING_OUT + "Answer:\n(Final answer)\n\n",
    ),
    Path.C: _template(
        "Understanding -> Reasoning -> Visual -> Reasoning -> Answer",
        _UNDERSTANDING_DEF + _REASONING_DEF
        + "- Visual = Visual Reasoning: describe one intermediate visual construct or visual step\n"
        + "- Answer = Final Answer: answer directly and concisely\n",
        _UNDERSTANDING_OUT + _REASONING_OUT
        + "Visual:\n(One intermediate visual construct or visual step)\n\n"
        + "Reasoning:\n(A short textual reasoning chain that uses the visual step)\n\n"
        + "Answer:\n(Final answer)\n\n",
    ),
    Path.H: _template(
        "Understanding -> Reasoning -> Hypothesis -> Reasoning -> Answer",
        _UNDERSTANDING_DEF + _REASONING_DEF
        + "- Hypothesis = Visual Hypothesis: describe candidate visual states or hypotheses "
          "before answering\n"
        + "- Answer = Final Answer: answer directly and concisely\n",
        _UNDERSTANDING_OUT + _REASONING_OUT
        + "Hypothesis:\n(Candidate visual states or hypotheses)\n\n"
        + "Reasoning:\n(A short textual reasoning chain that uses the visual hypotheses)\n\n"
        + "Answer:\n(Final answer)\n\n",
    ),
}


def render_prompt(path: Path, query: str) -> str:
    """Wrap ``query`` in the executor prompt for ``path``; the query is the final line."""
    if not query:
        raise ValueError("query must be nonempty")
    template = TEMPLATES[Path.parse(path)]
    head, _, tail = template.rpartition(QUERY_PLACEHOLDER)
    return head + query + tail
