import hashlib
import re
from typing import Dict, Iterable, List, Sequence

from services.errors import DataError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)

_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class TokenVocab:
    """Token <-> index map with the reserved tokens at indices 0-3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._index: Dict[str, int] = {}
        self._tokens: List[str] = []
        for token in RESERVED:
            self._add(token)
        for token in tokens:
            self._add(token)

    def _add(self, token: str) -> int:
        if token not in self._index:
            self._index[token] = len(self._tokens)
            self._tokens.append(token)
        return self._index[token]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "TokenVocab":
        vocab = cls()
        for text in texts:
            for token in tokenize(text):
                vocab._add(token)
        return vocab

    def encode(self, text: str, strict: bool = False) -> List[int]:
        ids = []
        for token in tokenize(text):
            index = self._index.get(token)
            if index is None:
                if strict:
                    raise DataError(f"Token {token!r} is not in the vocabulary")
                index = UNK_ID
            ids.append(index)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self._tokens[i] for i in ids if i >= len(RESERVED))

    def token(self, index: int) -> str:
        return self._tokens[index]

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()
