"""
Explicit-parameter toy policy: an n-gram logit table with grammar-constrained
decoding over text words and image-code tokens.

A context is (prompt key, images opened so far, decoder mode, last n-1 tokens).
Rows of the table are created lazily: reads of an absent row see zeros and
never insert, so only updated contexts become parameters.
"""

import hashlib
import logging
from functools import lru_cache

import numpy as np

from trajectory.model import FINAL_ANSWER_MARKER, ImageTokens, TextSegment
from utils.errors import EngineError

logger = logging.getLogger(__name__)

TEXT_MODE = "t"
IMAGE_MODE = "i"


class ToyVocab:
    """
    Token inventory: special tokens, task words, the final-answer marker,
    integer answers 0..max_number and one token per codebook row.
    """

    EOS = "<eos>"
    IMG = "<img>"
    UNK = "<unk>"
    BOS = "<bos>"

    def __init__(self, words, max_number, n_codes, marker=FINAL_ANSWER_MARKER):
        numbers = [str(i) for i in range(max_number + 1)]
        specials = [self.EOS, self.IMG, self.UNK, self.BOS]
        plain = [w for w in dict.fromkeys(words) if w not in numbers and w not in specials]
        self.marker = marker
        self.n_codes = n_codes
        self.tokens = specials + plain + [marker] + numbers + [f"<c{k}>" for k in range(n_codes)]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.code_offset = len(self.tokens) - n_codes

    @property
    def size(self):
        return len(self.tokens)

    @property
    def eos_id(self):
        return self.index[self.EOS]

    @property
    def img_id(self):
        return self.index[self.IMG]

    @property
    def bos_id(self):
        return self.index[self.BOS]

    @property
    def unk_id(self):
        return self.index[self.UNK]

    def is_code(self, token_id):
        return token_id >= self.code_offset

    def code_token(self, c):
        if not 0 <= c < self.n_codes:
            raise EngineError(f"code index {c} outside [0, {self.n_codes})")
        return self.code_offset + c

    def code_index(self, token_id):
        return token_id - self.code_offset

    def encode_text(self, text):
        """Word ids of a text; the marker is one token, unknown words map to <unk>."""
        ids = []
        for k, part in enumerate(text.split(self.marker)):
            if k > 0:
                ids.append(self.index[self.marker])
            ids.extend(self.index.get(w, self.unk_id) for w in part.split())
        return ids

    def decode_text(self, ids):
        structural = {self.eos_id, self.img_id, self.bos_id}
        return " ".join(self.tokens[i] for i in ids if i not in structural)


def prompt_key(prompt_text, prompt_image=None):
    """Stable key of a prompt (text plus optional image tokens)."""
    h = hashlib.blake2b(prompt_text.encode("utf-8"), digest_size=8)
    if prompt_image is not None:
        h.update(b"|" + ",".join(str(i) for i in prompt_image.indices).encode("ascii"))
    return h.hexdigest()


def trajectory_prompt_key(t):
    return prompt_key(t.prompt_text, t.prompt_image)


def response_token_ids(t, vocab):
    """Flatten a trajectory's response into policy token ids."""
    ids = []
    for seg in t.segments:
        if isinstance(seg, TextSegment):
            ids.extend(seg.token_ids if seg.token_ids is not None else vocab.encode_text(seg.content))
        else:
            ids.extend(vocab.code_token(c) for c in seg.indices)
    return ids


def top_p_support(p, top_p):
    """Indices of the smallest prefix of the sorted distribution with mass >= top_p."""
    order = np.argsort(-p, kind="stable")
    if top_p >= 1.0:
        return order
    cum = np.cumsum(p[order])
    k = min(int(np.searchsorted(cum, top_p, side="left")) + 1, p.size)
    return order[:k]


def sample_index(p, top_p, rng):
    keep = top_p_support(p, top_p)
    q = np.cumsum(p[keep])
    j = int(np.searchsorted(q, rng.random() * q[-1], side="right"))
    return int(keep[min(j, keep.size - 1)])


@lru_cache(maxsize=65536)
def _default_hidden(seed, ctx, dim):
    digest = hashlib.blake2b(f"{seed}|{ctx}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    h = rng.normal(0.0, 0.1, dim)
    h.setflags(write=False)
    return h


class ToyPolicy:
    """
    n-gram logit table policy with a per-context hidden-state proxy.

    Parameters:
        logits[ctx]: V logits for the next token in context ctx
        hidden[ctx]: H-dim state used by the perception loss at image-token positions
        proj: D x H projection from hidden states to codebook space
    """

    def __init__(self, vocab, image_grid, context_order=2, hidden_dim=8, embed_dim=8, seed=0):
        if context_order < 1:
            raise EngineError(f"context_order must be >= 1, got {context_order}")
        if image_grid < 1:
            raise EngineError(f"image_grid must be positive, got {image_grid}")
        self.vocab = vocab
        self.image_grid = image_grid
        self.image_tokens = image_grid * image_grid
        self.context_order = context_order
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.seed = seed

        self.logits = {}
        self.hidden = {}
        self.proj = np.random.default_rng([seed, 1]).normal(0.0, 0.1, (embed_dim, hidden_dim))

        ids = np.arange(vocab.size)
        text_ids = ids[(ids < vocab.code_offset) & (ids != vocab.bos_id) & (ids != vocab.unk_id)]
        self._allowed = {TEXT_MODE: text_ids, IMAGE_MODE: ids[vocab.code_offset:]}
        self._position = {}
        for mode, allowed in self._allowed.items():
            pos = np.full(vocab.size, -1, dtype=np.int64)
            pos[allowed] = np.arange(allowed.size)
            self._position[mode] = pos

    # -- decoding grammar -------------------------------------------------

    def initial_state(self):
        """(images opened, mode, history, codes left in the open image)."""
        return (0, TEXT_MODE, (self.vocab.bos_id,) * (self.context_order - 1), 0)

    def _push(self, history, token):
        keep = self.context_order - 1
        return (history + (token,))[-keep:] if keep else ()

    def advance(self, state, token):
        n_images, mode, history, remaining = state
        if mode == TEXT_MODE:
            if token == self.vocab.img_id:
                return (n_images + 1, IMAGE_MODE, self._push(history, token), self.image_tokens)
            return (n_images, TEXT_MODE, self._push(history, token), 0)
        remaining -= 1
        if remaining == 0:
            # a closed image restarts the text history
            return (n_images, TEXT_MODE, (self.vocab.bos_id,) * (self.context_order - 1), 0)
        return (n_images, IMAGE_MODE, self._push(history, token), remaining)

    def context_key(self, pkey, state):
        n_images, mode, history, _ = state
        return f"{pkey}|{n_images}|{mode}|{','.join(str(t) for t in history)}"

    def walk(self, pkey, tokens):
        """
        Context of every position of a response token sequence.

        Returns:
            steps: list of (ctx_key, mode) per token

        Raises:
            EngineError: a token is illegal in its decoder mode
        """
        state = self.initial_state()
        steps = []
        for pos, token in enumerate(tokens):
            mode = state[1]
            if self._position[mode][token] < 0:
                raise EngineError(f"token {self.vocab.tokens[token]!r} at position {pos} is illegal in mode {mode!r}")
            steps.append((self.context_key(pkey, state), mode))
            if token == self.vocab.eos_id:
                if pos != len(tokens) - 1:
                    raise EngineError(f"<eos> at position {pos} is not the last token")
                break
            state = self.advance(state, token)
        return steps

    # -- distributions ----------------------------------------------------

    def row(self, ctx):
        z = self.logits.get(ctx)
        return z if z is not None else np.zeros(self.vocab.size)

    def distribution(self, ctx, mode, temperature=1.0):
        """Allowed token ids and their tempered softmax probabilities."""
        allowed = self._allowed[mode]
        z = self.row(ctx)[allowed] / temperature
        z = z - z.max()
        p = np.exp(z)
        return allowed, p / p.sum()

    def position_of(self, mode, token):
        return int(self._position[mode][token])

    def hidden_state(self, ctx):
        h = self.hidden.get(ctx)
        return h if h is not None else _default_hidden(self.seed, ctx, self.hidden_dim)

    def sample(self, pkey, rng, temperature=1.0, top_p=1.0, max_new_tokens=64):
        """
        Sample one response. The budget is checked only between text tokens, so an
        opened image always completes.
        """
        state = self.initial_state()
        tokens = []
        while True:
            if state[1] == TEXT_MODE and len(tokens) >= max_new_tokens:
                break
            allowed, p = self.distribution(self.context_key(pkey, state), state[1], temperature)
            token = int(allowed[sample_index(p, top_p, rng)])
            tokens.append(token)
            if token == self.vocab.eos_id:
                break
            state = self.advance(state, token)
        return tokens

    def token_logps(self, pkey, tokens, temperature=1.0):
        out = np.empty(len(tokens))
        for t, ((ctx, mode), token) in enumerate(zip(self.walk(pkey, tokens), tokens)):
            _, p = self.distribution(ctx, mode, temperature)
            out[t] = np.log(p[self.position_of(mode, token)])
        return out

    def token_entropies(self, pkey, tokens, temperature=1.0):
        out = np.empty(len(tokens))
        for t, (ctx, mode) in enumerate(self.walk(pkey, tokens)):
            _, p = self.distribution(ctx, mode, temperature)
            out[t] = -np.sum(p * np.log(np.maximum(p, 1e-300)))
        return out

    def backprop_logits(self, pkey, tokens, d_logp, temperature=1.0, d_entropy=None, grads=None):
        """
        Accumulate logit-table gradients from per-position upstream gradients.

        d logp_t / d z_j = (1/T)(1[j = y_t] - p_j);
        d H_t / d z_j = -(1/T) p_j (log p_j + H_t).

        Args:
            pkey: Prompt key
            tokens: Response token ids
            d_logp: Upstream gradient per position w.r.t. log pi(y_t)
            temperature: Softmax temperature
            d_entropy: Optional upstream gradient per position w.r.t. the entropy
            grads: Dict to accumulate into (keys ('logit', ctx))

        Returns:
            grads: Dict of V-dim gradient rows
        """
        grads = {} if grads is None else grads
        for t, ((ctx, mode), token) in enumerate(zip(self.walk(pkey, tokens), tokens)):
            coef = d_logp[t]
            ent_coef = 0.0 if d_entropy is None else d_entropy[t]
            if coef == 0.0 and ent_coef == 0.0:
                continue
            allowed, p = self.distribution(ctx, mode, temperature)
            g = -coef * p
            g[self.position_of(mode, token)] += coef
            if ent_coef:
                logp = np.log(np.maximum(p, 1e-300))
                entropy = -np.sum(p * logp)
                g -= ent_coef * p * (logp + entropy)
            key = ("logit", ctx)
            if key not in grads:
                grads[key] = np.zeros(self.vocab.size)
            grads[key][allowed] += g / temperature
        return grads

    # -- parameters -------------------------------------------------------

    def get_param(self, key):
        kind, ctx = key
        if kind == "logit":
            return self.row(ctx)
        if kind == "hidden":
            return self.hidden_state(ctx)
        if kind == "proj":
            return self.proj
        raise KeyError(key)

    def set_param(self, key, value):
        kind, ctx = key
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise EngineError(f"non-finite update for parameter {key}")
        if kind == "logit":
            self.logits[ctx] = value
        elif kind == "hidden":
            self.hidden[ctx] = value
        elif kind == "proj":
            self.proj = value
        else:
            raise KeyError(key)

    def snapshot(self):
        """Independent copy (used for the old and reference policies)."""
        other = ToyPolicy.__new__(ToyPolicy)
        other.__dict__.update(self.__dict__)
        other.logits = {k: v.copy() for k, v in self.logits.items()}
        other.hidden = {k: v.copy() for k, v in self.hidden.items()}
        other.proj = self.proj.copy()
        return other

    def to_table(self):
        """Sorted key -> float table of every materialized parameter."""
        table = {}
        for ctx, row in self.logits.items():
            for tok, value in zip(self.vocab.tokens, row):
                table[f"logit|{ctx}|{tok}"] = float(value)
        for ctx, h in self.hidden.items():
            for k, value in enumerate(h):
                table[f"hidden|{ctx}|{k}"] = float(value)
        for (i, j), value in np.ndenumerate(self.proj):
            table[f"proj|{i}|{j}"] = float(value)
        return dict(sorted(table.items()))

    # -- trajectories -----------------------------------------------------

    def to_segments(self, tokens):
        """Split a sampled token sequence into text and image-token segments."""
        segments = []
        text_ids = []
        codes = []
        for token in tokens:
            if self.vocab.is_code(token):
                codes.append(self.vocab.code_index(token))
                if len(codes) == self.image_tokens:
                    segments.append(ImageTokens(tuple(codes), self.image_grid, self.image_grid))
                    codes = []
                continue
            text_ids.append(token)
            if token == self.vocab.img_id:
                segments.append(TextSegment(self.vocab.decode_text(text_ids), tuple(text_ids)))
                text_ids = []
        if text_ids:
            segments.append(TextSegment(self.vocab.decode_text(text_ids), tuple(text_ids)))
        return segments
