"""Scoring a (merged) model on a task's test corpus."""

from __future__ import annotations

from .data import Corpus, format_prompt
from .metrics import ConfusionCounts, GenPair, generation_scores, prf1, tokenize
from .model import TransformerWeights, answer_logits, generate_batch, yes_no_from_logits
from .vocab import Vocabulary

DEFAULT_MAX_NEW = 24


def evaluate_task(
    weights: TransformerWeights,
    corpus: Corpus,
    vocab: Vocabulary,
    max_new: int = DEFAULT_MAX_NEW,
) -> dict[str, float]:
    """Classification metrics for T1, generation metrics for T2/T3 (fractions)."""
    prompts, targets = [], []
    for record in corpus.records:
        prompt, target = format_prompt(corpus.task, record, vocab)
        prompts.append(prompt)
        targets.append(target)
    if corpus.task == "T1":
        logits = answer_logits(weights, None, prompts)
        predicted = [yes_no_from_logits(row) for row in logits]
        gold = [r.label for r in corpus.records]
        p, r, f1 = prf1(ConfusionCounts.from_labels(predicted, gold))
        return {"precision": p, "recall": r, "f1": f1}
    room = weights.geometry.max_seq - max(len(p) for p in prompts)
    outputs = generate_batch(weights, None, prompts, min(max_new, room))
    pairs = []
    for prompt, out, record in zip(prompts, outputs, corpus.records):
        hypothesis = " ".join(vocab.decode(out[len(prompt) :]))
        reference = record.comment if corpus.task == "T2" else record.refined
        pairs.append(GenPair(tokenize(hypothesis), tokenize(reference)))
    return generation_scores(pairs)
