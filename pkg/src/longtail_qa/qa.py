"""Prompt-conditioned encoder-decoder QA model.

The encoder consumes an optional soft-prompt prefix (trainable embeddings
selected from the meta-prompt pool) followed by hard tokens: knowledge
prompt, context, question.  The decoder predicts the answer tokens; all
sequence scores are sums of target-token log-probabilities.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, concat, log_softmax, stack
from .miner import EMPTY_KNOWLEDGE, KnowledgePrompt
from .autograd import parameter
from .nn import (AdamW, DecoderBlock, Embedding, EncoderBlock, LayerNorm,
                 Module, causal_mask, pad_attention_mask)
from .oracle import ScoringDistribution
from .text import Vocab
from .tasks import QAInstance
from string import ascii_lowercase


def question_render(instance: QAInstance) -> str:
    """Question text as the model sees it (options appended for MC)."""
    q = instance.question
    if instance.format == "multiple_choice" and instance.options:
        opts = " ".join(f"({ascii_lowercase[i]}) {o}"
                        for i, o in enumerate(instance.options))
        q = f"{q} {opts}"
    return q


class QAModel(Module):
    """Output logits share the token embedding table (tied weights), which
    makes answer copying learnable at desk scale."""

    def __init__(self, vocab: Vocab, rng: np.random.Generator, d_model: int = 64,
                 n_heads: int = 4, d_ff: int = 128, n_layers: int = 2,
                 max_source_len: int = 96, max_target_len: int = 8,
                 max_soft_prefix: int = 64):
        self.vocab = vocab
        self.d_model = d_model
        self.max_source_len = max_source_len
        self.max_target_len = max_target_len
        self.tok_emb = Embedding(len(vocab), d_model, rng)
        self.pos_src = Embedding(max_soft_prefix + max_source_len, d_model, rng)
        self.pos_tgt = Embedding(max_target_len + 1, d_model, rng)
        self.enc_blocks = [EncoderBlock(d_model, n_heads, d_ff, rng)
                           for _ in range(n_layers)]
        self.dec_blocks = [DecoderBlock(d_model, n_heads, d_ff, rng)
                           for _ in range(n_layers)]
        self.ln_enc = LayerNorm(d_model)
        self.ln_dec = LayerNorm(d_model)
        self.out_bias = parameter(np.zeros(len(vocab)), name="out_bias")
        self.truncation_warnings = 0

    # -- input construction ---------------------------------------------------

    def source_ids(self, instance: QAInstance,
                   knowledge: KnowledgePrompt | None) -> list[int]:
        """Hard-token ids [knowledge; context; question], truncating the
        context tail first, then the hints, never the question."""
        knowledge = knowledge or EMPTY_KNOWLEDGE
        k_ids = self.vocab.encode(knowledge.rendered_text) if knowledge.hints else []
        c_ids = self.vocab.encode(instance.context)
        q_ids = self.vocab.encode(question_render(instance))
        budget = self.max_source_len
        over = len(k_ids) + len(c_ids) + len(q_ids) - budget
        if over > 0:
            self.truncation_warnings += 1
            cut = min(over, len(c_ids))
            c_ids = c_ids[: len(c_ids) - cut]
            over -= cut
        if over > 0:
            cut = min(over, len(k_ids))
            k_ids = k_ids[: len(k_ids) - cut]
            over -= cut
        if over > 0:
            raise ValueError(
                f"question alone exceeds max_source_len for {instance.uid}")
        return k_ids + c_ids + q_ids

    def target_ids(self, instance: QAInstance) -> list[int]:
        ids = self.vocab.encode(instance.answer)[: self.max_target_len - 1]
        if not ids:
            ids = [Vocab.UNK]
        return ids + [Vocab.EOS]

    # -- forward ----------------------------------------------------------------

    def encode(self, source_batch: list[list[int]],
               soft_prefixes: list[Tensor] | None) -> tuple[Tensor, np.ndarray]:
        B = len(source_batch)
        T = max(1, max(len(s) for s in source_batch))
        ids = np.zeros((B, T), dtype=np.int64)
        valid = np.zeros((B, T), dtype=bool)
        for r, row in enumerate(source_batch):
            ids[r, : len(row)] = row
            valid[r, : len(row)] = True
        x = self.tok_emb(ids)
        if soft_prefixes is not None:
            prefix = stack(soft_prefixes, axis=0)              # (B, P, d)
            x = concat([prefix, x], axis=1)
            valid = np.concatenate(
                [np.ones((B, prefix.shape[1]), dtype=bool), valid], axis=1)
        L = x.shape[1]
        x = x + self.pos_src(np.arange(L))
        mask = pad_attention_mask(valid)
        for blk in self.enc_blocks:
            x = blk(x, mask)
        return self.ln_enc(x), valid

    def _decode_logits(self, enc_out: Tensor, enc_valid: np.ndarray,
                       tgt_in: np.ndarray) -> Tensor:
        Tt = tgt_in.shape[1]
        x = self.tok_emb(tgt_in) + self.pos_tgt(np.arange(Tt))
        cmask = causal_mask(Tt)
        xmask = pad_attention_mask(enc_valid)
        for blk in self.dec_blocks:
            x = blk(x, enc_out, cmask, xmask)
        return self.ln_dec(x) @ self.tok_emb.table.swapaxes(0, 1) + self.out_bias

    def sequence_logprobs(self, source_batch: list[list[int]],
                          soft_prefixes: list[Tensor] | None,
                          target_batch: list[list[int]]) -> Tensor:
        """(B,) sums of log p(target_t) with teacher forcing."""
        B = len(target_batch)
        Tt = max(len(t) for t in target_batch)
        tgt = np.full((B, Tt), Vocab.PAD, dtype=np.int64)
        tmask = np.zeros((B, Tt), dtype=np.float64)
        for r, row in enumerate(target_batch):
            tgt[r, : len(row)] = row
            tmask[r, : len(row)] = 1.0
        tgt_in = np.concatenate(
            [np.full((B, 1), Vocab.BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
        enc_out, enc_valid = self.encode(source_batch, soft_prefixes)
        logits = self._decode_logits(enc_out, enc_valid, tgt_in)
        logp = log_softmax(logits, axis=-1)
        rows = np.repeat(np.arange(B)[:, None], Tt, axis=1)
        cols = np.tile(np.arange(Tt)[None, :], (B, 1))
        picked = logp[(rows, cols, tgt)]                        # (B, Tt)
        return (picked * tmask).sum(axis=1)

    # -- losses and scoring ---------------------------------------------------------

    def qa_loss(self, instances: list[QAInstance],
                soft_prefixes: list[Tensor] | None,
                knowledge_prompts: list[KnowledgePrompt] | None) -> Tensor:
        """Mean over the batch of the negative log-likelihood of the gold
        answers.  Gradients reach the model and the soft prefixes."""
        if not instances:
            raise ValueError("batch is empty")
        kps = knowledge_prompts or [None] * len(instances)
        sources = [self.source_ids(inst, kp) for inst, kp in zip(instances, kps)]
        targets = [self.target_ids(inst) for inst in instances]
        logprobs = self.sequence_logprobs(sources, soft_prefixes, targets)
        return -logprobs.sum() * (1.0 / len(instances))

    def answer_logprob(self, instance: QAInstance, soft_prefix: Tensor | None,
                       knowledge: KnowledgePrompt | None) -> Tensor:
        prefixes = [soft_prefix] if soft_prefix is not None else None
        return self.sequence_logprobs(
            [self.source_ids(instance, knowledge)], prefixes,
            [self.target_ids(instance)]).reshape(())

    def candidate_logprobs(self, instance: QAInstance, candidates,
                           soft_prefix: Tensor | None) -> Tensor:
        """Per-candidate log p(gold | hint as pseudo knowledge prompt)."""
        candidates.require_hints()
        n = len(candidates.examples)
        sources = [
            self.source_ids(instance, KnowledgePrompt.from_hints([h.text]))
            for h in candidates.hints
        ]
        prefixes = [soft_prefix] * n if soft_prefix is not None else None
        targets = [self.target_ids(instance)] * n
        return self.sequence_logprobs(sources, prefixes, targets)

    def qa_candidate_distribution(self, instance: QAInstance, candidates,
                                  soft_prefix: Tensor | None
                                  ) -> tuple[Tensor, ScoringDistribution]:
        """Softmax across candidates of the gold-answer log-likelihoods."""
        if not candidates.examples:
            raise ValueError("candidate set is empty")
        logprobs = self.candidate_logprobs(instance, candidates, soft_prefix)
        probs = log_softmax(logprobs, axis=0).exp()
        return probs, ScoringDistribution("f", probs.data.copy()).validate()

    # -- generation --------------------------------------------------------------------

    def predict(self, instance: QAInstance, soft_prefix: Tensor | None,
                knowledge: KnowledgePrompt | None) -> str:
        """Greedy decode up to max_target_len tokens."""
        source = [self.source_ids(instance, knowledge)]
        prefixes = [soft_prefix] if soft_prefix is not None else None
        enc_out, enc_valid = self.encode(source, prefixes)
        enc_out = enc_out.detach()
        out: list[int] = []
        for _ in range(self.max_target_len):
            tgt_in = np.array([[Vocab.BOS] + out], dtype=np.int64)
            logits = self._decode_logits(enc_out, enc_valid, tgt_in)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == Vocab.EOS:
                break
            out.append(nxt)
        return self.vocab.decode(out)


def make_optimizer(model_params: list, lr: float, weight_decay: float = 0.0) -> AdamW:
    return AdamW(model_params, lr=lr, weight_decay=weight_decay)
