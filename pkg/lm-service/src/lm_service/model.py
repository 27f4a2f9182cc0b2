"""Masked-LM backend: assembles query token layouts and scores them.

One backend owns one model and its tokenizer. Mask layout is computed here,
on the server, from the slot states a query declares: filled slots contribute
their tokens, partially filled slots their prefix followed by mask tokens,
masked slots a run of mask tokens. The focus names the mask position whose
log-probability row is returned.

Forward passes run under a lock, so concurrent requests serialize onto one
device queue. Rows are log-softmaxed in float64, which keeps their logsumexp
at zero to within reporting precision.
"""

from __future__ import annotations

import threading
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from transformers import AutoModelForMaskedLM, AutoTokenizer

from .wire import ParsedQuery, WFilled, WPartial, WireError


class MaskedLMBackend:
    def __init__(
        self,
        model_dir,
        device: str = "cpu",
        lmax: int = 3,
        scorer_id: Optional[str] = None,
        deterministic: bool = True,
    ):
        if lmax < 1:
            raise ValueError(f"lmax must be >= 1, got {lmax}")
        if deterministic:
            torch.manual_seed(0)
            torch.use_deterministic_algorithms(True)
        self.deterministic = deterministic
        self.lmax = lmax
        self.device = torch.device(device)
        self.tokenizer = AutoTokenizer.from_pretrained(str(model_dir))
        self.model = AutoModelForMaskedLM.from_pretrained(str(model_dir))
        self.model.to(self.device)
        self.model.eval()

        self.vocab_size = int(self.model.config.vocab_size)
        if len(self.tokenizer) != self.vocab_size:
            raise ValueError(
                f"tokenizer vocabulary ({len(self.tokenizer)}) does not match "
                f"model vocabulary ({self.vocab_size})"
            )
        for name in ("mask_token_id", "cls_token_id", "sep_token_id", "pad_token_id"):
            if getattr(self.tokenizer, name, None) is None:
                raise ValueError(f"tokenizer lacks {name.replace('_id', '')}")
        self._mask = int(self.tokenizer.mask_token_id)
        self._cls = int(self.tokenizer.cls_token_id)
        self._sep = int(self.tokenizer.sep_token_id)
        self._pad = int(self.tokenizer.pad_token_id)
        self._unk = int(self.tokenizer.unk_token_id)
        self._token_to_id = dict(self.tokenizer.get_vocab())
        self._id_to_token = tuple(
            self.tokenizer.convert_ids_to_tokens(list(range(self.vocab_size)))
        )
        self._max_len = int(
            getattr(self.model.config, "max_position_embeddings", 512)
        )
        self.scorer_id = scorer_id or Path(str(model_dir)).name
        self.tokenizer_id = f"{type(self.tokenizer).__name__}:{self.vocab_size}"
        self._lock = threading.Lock()
        self._segment_cache: dict[str, list[int]] = {}

    # --- text endpoints -----------------------------------------------------

    def tokenize_texts(self, texts: Sequence[str]) -> list[list[str]]:
        return [self.tokenizer.tokenize(text) for text in texts]

    def detokenize_rows(self, rows: Sequence[Sequence[str]]) -> list[str]:
        return [self.tokenizer.convert_tokens_to_string(list(row)) for row in rows]

    # --- scoring --------------------------------------------------------------

    def _segment_ids(self, text: str) -> list[int]:
        hit = self._segment_cache.get(text)
        if hit is None:
            tokens = self.tokenizer.tokenize(text)
            hit = [self._token_to_id.get(t, self._unk) for t in tokens]
            self._segment_cache[text] = hit
        return hit

    def _assemble(self, query: ParsedQuery) -> tuple[list[int], int]:
        ids = [self._cls]
        focus_pos = -1
        for i, segment in enumerate(query.segments):
            if i % 2 == 0:
                if segment.strip():
                    ids.extend(self._segment_ids(segment))
                continue
            state = query.states[segment]
            start = len(ids)
            if isinstance(state, WFilled):
                ids.extend(self._token_to_id.get(t, self._unk) for t in state.tokens)
            elif isinstance(state, WPartial):
                ids.extend(self._token_to_id.get(t, self._unk) for t in state.prefix)
                ids.extend([self._mask] * (state.total - len(state.prefix)))
            else:
                ids.extend([self._mask] * state.length)
            if segment == query.focus_slot:
                focus_pos = start + query.focus_index
        ids.append(self._sep)
        if len(ids) > self._max_len:
            raise WireError(
                422,
                f"assembled sequence of {len(ids)} tokens exceeds the model "
                f"limit of {self._max_len}",
            )
        return ids, focus_pos

    def logprob_rows(self, queries: Sequence[ParsedQuery]) -> np.ndarray:
        assembled = [self._assemble(q) for q in queries]
        width = max(len(ids) for ids, _ in assembled)
        input_ids = torch.full((len(assembled), width), self._pad, dtype=torch.long)
        attention = torch.zeros((len(assembled), width), dtype=torch.long)
        positions = torch.empty(len(assembled), dtype=torch.long)
        for b, (ids, focus) in enumerate(assembled):
            input_ids[b, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            attention[b, : len(ids)] = 1
            positions[b] = focus
        with self._lock, torch.no_grad():
            logits = self.model(
                input_ids=input_ids.to(self.device),
                attention_mask=attention.to(self.device),
            ).logits
        focus_logits = logits[torch.arange(len(assembled)), positions]
        rows = torch.log_softmax(focus_logits.to(torch.float64), dim=-1)
        return rows.cpu().numpy()

    def resolve_requested(self, tokens: Sequence[str]) -> list[int]:
        ids = []
        for tok in tokens:
            idx = self._token_to_id.get(tok)
            if idx is None:
                raise WireError(400, f"requested token {tok!r} is not in the vocabulary")
            ids.append(idx)
        return ids

    def top_rows(
        self,
        queries: Sequence[ParsedQuery],
        m: int,
        requested: Optional[Sequence[Sequence[str]]],
    ) -> list[tuple[list[str], list[float]]]:
        req_ids = [
            self.resolve_requested(row) for row in requested
        ] if requested is not None else [[] for _ in queries]
        rows = self.logprob_rows(queries)
        out = []
        for row, req in zip(rows, req_ids):
            if m >= self.vocab_size:
                chosen = list(range(self.vocab_size))
            else:
                # logprob desc, vocab id asc on ties; lexsort's last key wins
                order = np.lexsort((np.arange(self.vocab_size), -row))
                chosen = order[:m].tolist()
                have = set(chosen)
                for idx in req:
                    if idx not in have:
                        chosen.append(idx)
                        have.add(idx)
            out.append(
                (
                    [self._id_to_token[i] for i in chosen],
                    [float(row[i]) for i in chosen],
                )
            )
        return out
