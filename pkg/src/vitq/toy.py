"""Synthetic desk-scale data and a classifier built without training.

Images of class ``c`` are a fixed random mean image plus Gaussian noise.
The encoder weights are random; the head is a nearest-centroid classifier
over the class-token features of the class mean images, so the model
separates the synthetic classes by construction.
"""
import numpy as np

from .model import LayerWeights, ViTConfig, ViTModel, encode

TOY_CONFIG = ViTConfig(
    image_height=16, image_width=16, channels=3, patch_size=4,
    embed_dim=32, num_layers=2, num_heads=4, mlp_dim=64, num_classes=10,
)


def _normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(np.float32)


def random_layer(rng, cfg: ViTConfig, scale=1.0):
    d, f = cfg.embed_dim, cfg.mlp_dim
    s = np.float32(scale)
    return LayerWeights(
        wq=_normal(rng, (d, d), 1 / np.sqrt(d)) * s,
        wk=_normal(rng, (d, d), 1 / np.sqrt(d)) * s,
        wv=_normal(rng, (d, d), 1 / np.sqrt(d)) * s,
        wo=_normal(rng, (d, d), 1 / np.sqrt(d)) * s,
        w1=_normal(rng, (d, f), 1 / np.sqrt(d)) * s,
        b1=_normal(rng, (f,), 0.1),
        w2=_normal(rng, (f, d), 1 / np.sqrt(f)) * s,
        b2=_normal(rng, (d,), 0.1),
        ln1_gamma=(1 + _normal(rng, (d,), 0.1)),
        ln1_beta=_normal(rng, (d,), 0.1),
        ln2_gamma=(1 + _normal(rng, (d,), 0.1)),
        ln2_beta=_normal(rng, (d,), 0.1),
    )


def class_means(cfg: ViTConfig, seed=0):
    rng = np.random.default_rng([seed, 1])
    return _normal(rng, (cfg.num_classes, cfg.image_height, cfg.image_width, cfg.channels), 1.0)


def sample_images(means, count, seed=0, noise=0.5):
    """``count`` images with labels cycling through the classes."""
    rng = np.random.default_rng([seed, 2])
    k = means.shape[0]
    labels = np.arange(count) % k
    images = means[labels] + _normal(rng, (count, *means.shape[1:]), noise)
    return images.astype(np.float32), labels


def make_toy_model(cfg: ViTConfig = TOY_CONFIG, seed=0, hot_layer=None, hot_scale=10.0):
    """Random encoder plus nearest-centroid head.

    ``hot_layer`` multiplies that layer's weight matrices by ``hot_scale``
    to make it much more sensitive to quantization than the others.
    """
    rng = np.random.default_rng([seed, 0])
    d = cfg.embed_dim
    layers = [
        random_layer(rng, cfg, hot_scale if i == hot_layer else 1.0)
        for i in range(cfg.num_layers)
    ]
    model = ViTModel(
        config=cfg,
        patch_embed=_normal(rng, (cfg.patch_dim, d), 1 / np.sqrt(cfg.patch_dim)),
        pos_embed=_normal(rng, (cfg.seq_len, d), 0.1),
        class_token=_normal(rng, (d,), 1.0),
        layers=layers,
        head_w=np.zeros((d, cfg.num_classes), np.float32),
        head_b=np.zeros(cfg.num_classes, np.float32),
    )
    feats = encode(class_means(cfg, seed), model)[:, 0, :].astype(np.float64)
    # logit_c = -|f - f_c|^2 / 2 up to a class-independent term
    head_w = feats.T.astype(np.float32)
    head_b = (-0.5 * np.sum(feats**2, axis=1)).astype(np.float32)
    return model.replace_tensors({"head.w": head_w, "head.b": head_b})


def toy_problem(seed=0, n_calib=64, n_eval=256, cfg: ViTConfig = TOY_CONFIG, hot_layer=None, noise=0.5):
    """Model, calibration images and held-out evaluation images for one seed."""
    model = make_toy_model(cfg, seed, hot_layer)
    means = class_means(cfg, seed)
    calib, calib_labels = sample_images(means, n_calib, seed=seed * 2 + 1, noise=noise)
    evals, eval_labels = sample_images(means, n_eval, seed=seed * 2 + 2, noise=noise)
    return model, (calib, calib_labels), (evals, eval_labels)
