"""scikit-learn style estimator wrapping MFDS-Net."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import evalkit
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import SupervisionConfig
from .network import ModelConfig, fold_model
from .training import build_model, predict_logits, train
from .validation import as_samples, check_pairs, check_pairs_masks


class ChangeDetector(ClassifierMixin, BaseEstimator):
    """Pixel-wise binary change detector for co-registered image pairs.

    Parameters
    ----------
    theta, phi : float
        Weights of the GSEM-branch and decoder-stage auxiliary losses.
    learning_rate : float
        Adam learning rate.
    epochs, batch_size : int
        Training length and mini-batch size.
    max_steps : int
        Optional cap on optimizer steps (0 disables the cap).
    threshold : float
        Probability threshold used by :meth:`predict`.
    sigma : float
        Gaussian width of the high-frequency edge map.
    grids : tuple of int
        Patch grids of the semantic context modules.
    literal_add : bool
        Sum raw attention logits in the DFIM additive branch.
    random_state : int
        Seed for weight initialization and batch order.
    checkpoint_dir : str or None
        Where to keep best/last checkpoints and the epoch log.
    """

    def __init__(self, theta=0.2, phi=0.5, learning_rate=1e-3, epochs=200, batch_size=8,
                 max_steps=0, threshold=0.5, sigma=1.0, grids=(1, 2, 4, 8), gsem_reduction=16,
                 cbam_reduction=16, dfim_reduction=4, literal_add=False, random_state=0,
                 checkpoint_dir=None, eval_batch_size=4):
        self.theta = theta
        self.phi = phi
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.threshold = threshold
        self.sigma = sigma
        self.grids = grids
        self.gsem_reduction = gsem_reduction
        self.cbam_reduction = cbam_reduction
        self.dfim_reduction = dfim_reduction
        self.literal_add = literal_add
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir
        self.eval_batch_size = eval_batch_size

    def _model_config(self):
        return ModelConfig(sigma=self.sigma, grids=tuple(self.grids), gsem_reduction=self.gsem_reduction,
                           cbam_reduction=self.cbam_reduction, dfim_reduction=self.dfim_reduction,
                           literal_add=self.literal_add)

    def _supervision_config(self):
        return SupervisionConfig(theta=self.theta, phi=self.phi, learning_rate=self.learning_rate,
                                 epochs=self.epochs, seed=self.random_state, batch_size=self.batch_size,
                                 max_steps=self.max_steps)

    @property
    def _divisor(self):
        return 8 * max(self.grids)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_pairs_masks(X, y, self._divisor)
        samples = as_samples(X, y, "train")
        val = None
        if X_val is not None:
            Xv, yv = check_pairs_masks(X_val, y_val, self._divisor)
            val = as_samples(Xv, yv, "val")
        cfg = self._supervision_config()
        model = build_model(self._model_config(), self.random_state)
        self.model_, self.train_report_ = train(samples, cfg, model, val_dataset=val,
                                                out_dir=self.checkpoint_dir, threshold=self.threshold)
        self.classes_ = np.array([0, 1])
        self.image_shape_ = X.shape[2:4]
        return self

    def decision_function(self, X):
        """Per-pixel change logits, shape (n_samples, H, W)."""
        check_is_fitted(self, "model_")
        X = check_pairs(X, self._divisor)
        return predict_logits(self.model_, as_samples(X), self.eval_batch_size)

    def predict_proba(self, X):
        """Per-pixel change probability, shape (n_samples, H, W)."""
        logits = self.decision_function(X)
        return 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))

    def predict(self, X):
        return evalkit.binarize(self.decision_function(X), self.threshold)

    def confusion(self, X, y):
        X, y = check_pairs_masks(X, y, self._divisor)
        pred = self.predict(X)
        return evalkit.accumulate(pred, y)

    def score(self, X, y, sample_weight=None):
        """Pooled F1 over every pixel of every pair."""
        return evalkit.compute_metrics(self.confusion(X, y)).f1

    def metrics(self, X, y):
        return evalkit.compute_metrics(self.confusion(X, y))

    def fold(self):
        """Fold all DO-Conv layers into plain convolutions for inference."""
        check_is_fitted(self, "model_")
        fold_model(self.model_)
        return self

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self._supervision_config())

    @classmethod
    def from_checkpoint(cls, path, **params):
        model, meta, _ = load_checkpoint(path)
        mc = model.config
        sup = meta.get("supervision") or {}
        est = cls(sigma=mc.sigma, grids=tuple(mc.grids), gsem_reduction=mc.gsem_reduction,
                  cbam_reduction=mc.cbam_reduction, dfim_reduction=mc.dfim_reduction,
                  literal_add=mc.literal_add,
                  **{k: v for k, v in (("theta", sup.get("theta")), ("phi", sup.get("phi")),
                                        ("learning_rate", sup.get("learning_rate")),
                                        ("epochs", sup.get("epochs")), ("batch_size", sup.get("batch_size")),
                                        ("random_state", sup.get("seed"))) if v is not None})
        est.set_params(**params)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est

    def init_model(self):
        """Initialize an untrained model (useful for fold checks and smoke tests)."""
        self.model_ = build_model(self._model_config(), self.random_state)
        self.classes_ = np.array([0, 1])
        return self

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.non_deterministic = False
        return tags
