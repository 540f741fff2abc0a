"""Canonical prompt construction for the four structured LLM calls.

The exact wording here is part of the replay contract: changing any prompt
changes request digests and invalidates recorded transcripts, so edits must
be paired with a bump of `pipeline.PROMPT_REVISION` and regenerated fixtures.
"""

from __future__ import annotations

from typing import Any, Mapping, Sequence

from .gateway import ChatRequest

REFINE_SYSTEM = (
    "You maintain concise definitions for terms inside a concept hierarchy. "
    "Reply with JSON only."
)
ISA_SYSTEM = "You judge whether hypernym (is-a) statements are correct. Reply with JSON only."
RANK_SYSTEM = (
    "You choose the most plausible direct parent concepts for a term. Reply with JSON only."
)
PENALTY_SYSTEM = (
    "You audit candidate parent edges of a taxonomy using structural evidence. "
    "Reply with JSON only."
)


def refine_request(
    model_id: str,
    term: str,
    current_definition: str,
    root: str,
    root_definition: str,
    max_words: int,
    max_output_tokens: int = 512,
) -> ChatRequest:
    user = (
        f"Root topic: {root}\n"
        f"Root definition: {root_definition}\n"
        f"Term: {term}\n"
        f"Current definition: {current_definition or '(none)'}\n\n"
        "Rewrite the definition of the term so that it is consistent with the root topic, "
        "resolves any ambiguity toward that topic, and stays reliable and specific. "
        f"Use at most {max_words} words in a single paragraph.\n"
        'Reply with JSON: {"definition": "<rewritten definition>"}'
    )
    return ChatRequest(
        model_id=model_id,
        system_prompt=REFINE_SYSTEM,
        user_prompt=user,
        response_schema_tag="refine_definition",
        max_output_tokens=max_output_tokens,
        meta={"term": term},
    )


def isa_request(
    model_id: str,
    sentence: str,
    query: str,
    anchor: str,
    template_index: int,
    max_output_tokens: int = 64,
) -> ChatRequest:
    user = (
        f'Statement: "{sentence}"\n\n'
        f'Does the statement express a correct is-a relation in which "{anchor}" is the '
        f'more general concept and "{query}" is the more specific one?\n'
        'Reply with JSON: {"answer": "yes"} or {"answer": "no"}'
    )
    return ChatRequest(
        model_id=model_id,
        system_prompt=ISA_SYSTEM,
        user_prompt=user,
        response_schema_tag="isa_judgment",
        max_output_tokens=max_output_tokens,
        meta={"query": query, "anchor": anchor, "template_index": template_index},
    )


def rank_request(
    model_id: str,
    root: str,
    root_definition: str,
    child: str,
    child_definition: str,
    candidates: Sequence[tuple[str, str]],
    k2: int,
    max_output_tokens: int = 512,
) -> ChatRequest:
    lines = "\n".join(f"- {name}: {definition}" for name, definition in candidates)
    user = (
        f"Root topic: {root}\n"
        f"Root definition: {root_definition}\n"
        f"Child term: {child}\n"
        f"Child definition: {child_definition}\n"
        f"Candidate parents:\n{lines}\n\n"
        f"Within the semantic scope of the root topic, compare all candidates jointly and "
        f"select the {k2} most likely direct parents (hypernyms) of the child term, or all "
        "of them if fewer candidates exist. Assign each selected candidate a confidence "
        "score strictly between 0 and 1.\n"
        'Reply with JSON: {"parents": [{"parent": "<candidate>", "score": <confidence>}]}'
    )
    return ChatRequest(
        model_id=model_id,
        system_prompt=RANK_SYSTEM,
        user_prompt=user,
        response_schema_tag="rank_and_score",
        max_output_tokens=max_output_tokens,
        meta={"child": child, "candidates": [name for name, _ in candidates], "k2": k2},
    )


def penalty_request(
    model_id: str,
    root: str,
    child: str,
    parent_rows: Sequence[tuple[str, float, Mapping[str, float]]],
    max_output_tokens: int = 512,
) -> ChatRequest:
    lines = []
    for name, base_score, features in parent_rows:
        rendered = ", ".join(f"{key}={features[key]:.4f}" for key in sorted(features))
        lines.append(f"- {name}: base_score={base_score:.4f}, {rendered}")
    user = (
        f"Root topic: {root}\n"
        f"Child term: {child}\n"
        "Candidate parents with structural features:\n" + "\n".join(lines) + "\n\n"
        "Judge each candidate strictly within the semantic scope of the root topic and "
        "estimate how suitable it is as the direct parent of the child term. High "
        "popularity, strong skip-level support, a high depth penalty, or a weak margin "
        "suggest the candidate is overly general or an ancestor rather than the direct "
        "parent; strong sibling cohesion and pullback support suggest a stable direct "
        "attachment. Assign each candidate a penalty between 0 and 0.5, where a larger "
        "penalty means less suitable as the direct parent.\n"
        'Reply with JSON: {"penalties": [{"parent": "<candidate>", "penalty": <value>}]}'
    )
    return ChatRequest(
        model_id=model_id,
        system_prompt=PENALTY_SYSTEM,
        user_prompt=user,
        response_schema_tag="penalty",
        max_output_tokens=max_output_tokens,
        meta={"child": child, "parents": [name for name, _, _ in parent_rows]},
    )
