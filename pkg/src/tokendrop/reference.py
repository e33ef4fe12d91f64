"""Cache-free recomputation used as an oracle for the cached paths.

The whole token stream (prompt plus generated tokens) is pushed through
every layer at once, with a per-layer boolean visibility matrix standing in
for whatever the cached pipeline kept or dropped.
"""

from __future__ import annotations

import numpy as np

from .model import ToyWeights, embed_text, greedy_token, lm_layer_forward, logits_from_hidden


def masked_forward(x, weights: ToyWeights, masks) -> np.ndarray:
    """Final-layer hidden rows; ``masks[l][i, j]`` lets row i see row j at layer l."""
    x = np.asarray(x, dtype=np.float64)
    for layer in range(weights.config.lm_layers):
        x, _ = lm_layer_forward(x, weights, layer, mask=masks[layer])
    return x


def visibility_masks(ids, is_vision, n_prompt, prefill_alive, decode_alive):
    """Per-layer visibility reproducing a pruned-and-evicted cache.

    Prompt rows see the vision entries alive when that layer ran during
    prefill (``prefill_alive[l]``); generated rows see the vision entries
    left in the cache after eviction (``decode_alive[l]``). Text and
    generated entries are always visible, causally. Every row sees itself.
    """
    ids = np.asarray(ids)
    is_vision = np.asarray(is_vision, dtype=bool)
    n = len(ids)
    causal = np.tril(np.ones((n, n), dtype=bool))
    prompt_row = np.arange(n) < n_prompt
    masks = []
    for layer in range(len(prefill_alive)):
        seen_prompt = ~is_vision | np.isin(ids, list(prefill_alive[layer]))
        seen_gen = ~is_vision | np.isin(ids, list(decode_alive[layer]))
        cols = np.where(prompt_row[:, None], seen_prompt[None, :], seen_gen[None, :])
        m = causal & cols
        np.fill_diagonal(m, True)
        masks.append(m)
    return masks


def reference_generate(prompt_hidden, ids, is_vision, weights: ToyWeights, n_tokens: int,
                       prefill_alive=None, decode_alive=None, first_id: int | None = None):
    """Greedy generation by full recomputation at every step.

    Returns ``(tokens, hiddens)`` where ``hiddens[s]`` is the final-layer row
    that produced token ``s``. Without alive sets this is plain causal
    generation of the unmodified model.
    """
    cfg = weights.config
    prompt_hidden = np.asarray(prompt_hidden, dtype=np.float64)
    n_prompt = prompt_hidden.shape[0]
    ids = list(map(int, ids))
    is_vision = list(map(bool, is_vision))
    if prefill_alive is None:
        everyone = [i for i, v in zip(ids, is_vision) if v]
        prefill_alive = [everyone] * cfg.lm_layers
    if decode_alive is None:
        decode_alive = prefill_alive
    next_id = max(ids) + 1 if first_id is None else first_id
    rows = [prompt_hidden]
    tokens: list[int] = []
    hiddens: list[np.ndarray] = []
    for step in range(n_tokens):
        x = np.vstack(rows)
        masks = visibility_masks(ids, is_vision, n_prompt, prefill_alive, decode_alive)
        h = masked_forward(x, weights, masks)[-1]
        tok = greedy_token(logits_from_hidden(h, weights))
        tokens.append(tok)
        hiddens.append(h)
        rows.append(embed_text([tok], [n_prompt + step], weights))
        ids.append(next_id + step)
        is_vision.append(False)
    return tokens, hiddens
