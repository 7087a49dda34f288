"""scikit-learn style wrappers around the filterbank and the staged trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .audio import build_filterbank, fbsp_log_power
from .errors import ConfigurationError, ContractError
from .evalkit import zero_shot_classify
from .model import embed_dataset, embed_waveforms
from .tensor import no_grad
from .trainer import PHASE_RUNNERS, PHASES, Checkpoint, TrainingConfig, load_checkpoint, model_from_checkpoint
from .validation import check_dataset, check_modality, check_texts, check_waveforms


class FbspSpectrogram(TransformerMixin, BaseEstimator):
    """Log-power fbsp spectrogram as a stateless transformer.

    Parameters
    ----------
    n_bands : int, default=16
    sample_rate : int, default=16000
    kernel_len : int, default=511
        Odd number of kernel taps.
    order : int, default=2
        B-spline order of the wavelet envelope.
    hop : int, default=256
        Frame length in samples.

    Attributes
    ----------
    bank_ : FbspFilterBank
        The initial geometric filterbank built by :meth:`fit`.
    n_features_in_ : int
        Clip length seen during fit.

    Examples
    --------
    >>> import numpy as np
    >>> X = np.random.default_rng(0).standard_normal((2, 2048))
    >>> FbspSpectrogram(n_bands=8, kernel_len=127).fit_transform(X).shape
    (2, 1, 8, 8)
    """

    def __init__(self, n_bands=16, sample_rate=16000, kernel_len=511, order=2, hop=256):
        self.n_bands = n_bands
        self.sample_rate = sample_rate
        self.kernel_len = kernel_len
        self.order = order
        self.hop = hop

    def fit(self, X, y=None):
        X = check_waveforms(X)
        if self.hop < 1:
            raise ConfigurationError("hop must be >= 1")
        self.bank_ = build_filterbank(self.n_bands, self.sample_rate, self.kernel_len, self.order)
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "bank_")
        X = check_waveforms(X, min_samples=self.kernel_len)
        with no_grad():
            return fbsp_log_power(X, self.bank_, self.hop).values


class TriModalEstimator(ClassifierMixin, BaseEstimator):
    """Staged tri-modal training with zero-shot audio classification.

    ``fit`` runs ``phases`` in order on one dataset, each phase starting from
    the previous phase's checkpoint.  ``predict`` labels audio by the most
    similar class-name text embedding.

    Parameters
    ----------
    phases : tuple of str, default=("standalone", "cooperative", "full")
    embed_dim, n_bands, target_len : int
        Architecture of a freshly built model.
    batch_size : int, default=64
    eta0, gamma, epochs : optional
        Shared overrides; ``None`` keeps each phase's defaults.
    seed : int, default=0
    phase_params : dict, optional
        Per-phase ``TrainingConfig`` overrides, e.g. ``{"standalone": {"batch_size": 16}}``.
    """

    def __init__(self, phases=("standalone", "cooperative", "full"), embed_dim=64, n_bands=16,
                 target_len=16000, batch_size=64, eta0=None, gamma=None, epochs=None, seed=0,
                 phase_params=None):
        self.phases = phases
        self.embed_dim = embed_dim
        self.n_bands = n_bands
        self.target_len = target_len
        self.batch_size = batch_size
        self.eta0 = eta0
        self.gamma = gamma
        self.epochs = epochs
        self.seed = seed
        self.phase_params = phase_params

    def _config(self, phase: str) -> TrainingConfig:
        kw = dict(phase=phase, embed_dim=self.embed_dim, n_bands=self.n_bands,
                  target_len=self.target_len, batch_size=self.batch_size, eta0=self.eta0,
                  gamma=self.gamma, epochs=self.epochs, seed=self.seed)
        kw.update((self.phase_params or {}).get(phase, {}))
        return TrainingConfig(**kw)

    def fit(self, X, y=None, checkpoint: Checkpoint | None = None):
        """Train on a dataset (or manifest path).

        ``y`` is ignored: labels come from the dataset's label sets.  A
        ``checkpoint`` seeds the first phase when it is not ``standalone``.
        """
        dataset = check_dataset(X)
        phases = tuple(self.phases)
        bad = [p for p in phases if p not in PHASES]
        if not phases or bad:
            raise ConfigurationError(f"phases must be drawn from {PHASES}, got {phases}")
        ckpt = checkpoint
        self.history_ = {}
        for phase in phases:
            runner = PHASE_RUNNERS[phase]
            config = self._config(phase)
            if phase == "standalone":
                result = runner(dataset, config, ckpt if ckpt is not None and ckpt.phase == phase else None)
            else:
                result = runner(ckpt, dataset, config)
            ckpt = result.checkpoint
            self.history_[phase] = result.history
        self._set_state(ckpt, result.model)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt) -> "TriModalEstimator":
        """Fitted estimator around a saved checkpoint (object or path)."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        snap = ckpt.snapshot
        enc = snap["encoder"]
        est = cls(embed_dim=enc["embed_dim"], n_bands=enc["n_bands"], target_len=enc["target_len"],
                  seed=snap["training"]["seed"])
        est.history_ = {}
        est._set_state(ckpt, model_from_checkpoint(ckpt))
        return est

    def _set_state(self, ckpt, model):
        self.checkpoint_ = ckpt
        self.model_ = model
        self.classes_ = np.array(ckpt.snapshot["classes"], dtype=object)

    def _audio_embeddings(self, X) -> np.ndarray:
        if self.model_.audio.mode != "embedding":
            raise ContractError("the audio head is still in logits mode; fit a contrastive phase first")
        if isinstance(X, (np.ndarray, list)):
            return embed_waveforms(self.model_, check_waveforms(X))
        return embed_dataset(self.model_, check_dataset(X), "audio").embeddings

    def transform(self, X, modality: str = "audio"):
        """Unit-norm embeddings [M, embed_dim] for one modality.

        Audio accepts raw clips or a dataset; image needs a dataset; text
        accepts a list of strings or a dataset.
        """
        check_is_fitted(self, "model_")
        check_modality(modality)
        if modality == "audio":
            return self._audio_embeddings(X)
        if modality == "text" and isinstance(X, (list, tuple)):
            with no_grad():
                return self.model_.text.encode_texts(check_texts(X)).values
        return embed_dataset(self.model_, check_dataset(X), modality).embeddings

    def decision_function(self, X):
        """Cosine similarity of each clip to each class-name text [M, K]."""
        check_is_fitted(self, "model_")
        emb = self._audio_embeddings(X)
        with no_grad():
            targets = self.model_.text.encode_texts(list(self.classes_)).values
        return emb @ targets.T

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y=None, sample_weight=None):
        """Zero-shot accuracy.

        With ``y`` given, plain accuracy of :meth:`predict` against ``y``.
        Otherwise ``X`` must be a dataset and accuracy is computed over its
        single-label samples.
        """
        if y is not None:
            return super().score(X, y, sample_weight)
        check_is_fitted(self, "model_")
        dataset = check_dataset(X)
        emb = embed_dataset(self.model_, dataset, "audio")
        with no_grad():
            targets = self.model_.text.encode_texts(list(self.classes_)).values
        return zero_shot_classify(emb, list(self.classes_), targets).accuracy
