"""Neural relation extraction: training, evaluation and inference."""

import json

from ._core import (
    Model as _Model,
    NreError,
    accuracy,
    detect_mentions,
    micro_f1,
    train,
    word_tokenize,
)

__all__ = ["Model", "NreError", "accuracy", "detect_mentions", "micro_f1", "train", "word_tokenize"]


class Model:
    """A sentence-level checkpoint loaded for inference."""

    def __init__(self, path):
        self._model = _Model(str(path))

    @property
    def relations(self):
        return self._model.relations

    @property
    def architecture(self):
        return json.loads(self._model.architecture_json())

    def extract(self, text, h=None, t=None, top_k=1):
        request = {"text": text, "top_k": top_k}
        if h is not None:
            request["h"] = list(h)
        if t is not None:
            request["t"] = list(t)
        return json.loads(self._model.extract_json(json.dumps(request)))["results"]

    def evaluate(self, path, metric="acc"):
        return json.loads(self._model.evaluate_json(str(path), metric))
