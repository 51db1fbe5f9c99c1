"""Shared test machinery: finite-difference gradient checks, the synthetic
training pipeline, heatmap localization scoring, and a scriptable tile
server for fault injection."""

import io
import json
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from hedonic import data, models, synth, training
from hedonic import tensor_core as tc

FEATURES = [f"x{i}" for i in range(8)]


# ---------------------------------------------------------------------------
# gradient checking (float64 twin of the float32 layers)
# ---------------------------------------------------------------------------

def finite_difference_grad(f, x, h=1e-3):
    """Central-difference gradient of scalar f() w.r.t. array x, in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def _layer_case(kind, rng):
    """Build (layer, input) in float64 for one gradient-check trial."""
    if kind == "dense":
        layer = tc.Dense(rng.standard_normal((4, 3)), rng.standard_normal(3))
        x = rng.standard_normal((2, 4))
    elif kind == "conv2d":
        layer = tc.Conv2d(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
        x = rng.standard_normal((2, 4, 4, 2))   # channels-last
    elif kind == "maxpool2d":
        layer = tc.MaxPool2d()
        x = rng.standard_normal((2, 4, 4, 2))
    elif kind == "relu":
        layer = tc.ReLU()
        x = rng.standard_normal((3, 5))
    elif kind == "global_avg_pool":
        layer = tc.GlobalAvgPool()
        x = rng.standard_normal((2, 3, 3, 2))
    else:
        raise ValueError(kind)
    return layer, x


LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "relu", "global_avg_pool")


def gradient_check_layer(kind, trials, seed=0, h=1e-3):
    """Worst relative error between analytic and FD gradients over trials."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        layer, x = _layer_case(kind, rng)
        probe = rng.standard_normal(layer.forward(x).shape)

        def scalar():
            return float((layer.forward(x) * probe).sum())

        scalar()  # refresh the forward cache
        grad = tc.layer_backward(layer, probe)
        for p, analytic in zip(layer.params, grad.param_grads):
            worst = max(worst, max_rel_error(analytic, finite_difference_grad(scalar, p, h)))
        worst = max(worst, max_rel_error(grad.input_grad, finite_difference_grad(scalar, x, h)))
    return worst


# ---------------------------------------------------------------------------
# synthetic end-to-end pipeline
# ---------------------------------------------------------------------------

def synth_pipeline(seed, gamma, n=2000, noise_std=0.15, nonlinear=True, image_size=64,
                   out_dir=None, split_seed=42):
    """Generate, write, reload, and encode a synthetic dataset.

    Returns (schema, {split: ArrayDataset}, masks, dataset_dir).
    """
    spec = synth.SynthSpec(n=n, seed=seed, image_size=image_size, image_weight=gamma,
                           noise_std=noise_std, nonlinear=nonlinear)
    ds = synth.generate_synthetic_dataset(spec)
    out = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="hedonic-synth-"))
    info = synth.write_dataset(ds, out)
    records = data.load_tabular_csv(info["csv"], FEATURES, []).records
    split = data.split_dataset([r.id for r in records], seed=split_seed)
    by_id = {r.id: r for r in records}
    splits = {name: [by_id[i] for i in getattr(split, name)]
              for name in ("train", "val", "test")}
    schema = data.fit_normalizer(splits["train"], FEATURES, [])
    image_dir = out / "images"
    train_paths = [data.resolve_image_path(r, image_dir) for r in splits["train"]]
    schema.image_mean, schema.image_std = data.fit_image_stats(train_paths)
    arrays = {name: data.build_arrays(recs, schema, image_dir=image_dir,
                                      image_size=image_size, with_images=True)
              for name, recs in splits.items()}
    masks = json.loads((out / "masks.json").read_text())
    return schema, arrays, masks, out


def train_kind(kind, schema, arrays, seed, image_size=64, **train_kwargs):
    """Build and fit one model kind, returning (model, test Metrics)."""
    mc = models.ModelConfig(kind=kind, tabular_dim=schema.dim, image_size=image_size)
    model = models.build_model(mc, seed, schema)
    if kind == "linreg":
        model.fit(arrays["train"].x, arrays["train"].y)
    else:
        cfg = training.TrainingConfig(seed=seed, **train_kwargs)
        training.train(model, arrays["train"], arrays["val"], cfg)
    return model, training.evaluate_metrics(model, arrays["test"])


def top_decile_mass_inside(heatmap, rect, dilation):
    """Fraction of top-decile heatmap mass whose window centers fall inside
    the rectangle's bounding box dilated by `dilation` pixels."""
    grid = heatmap.normalized
    gy, gx = grid.shape
    top = grid >= np.quantile(grid, 0.9)
    cy = np.arange(gy) * heatmap.stride + heatmap.window / 2.0
    cx = np.arange(gx) * heatmap.stride + heatmap.window / 2.0
    inside = ((cy[:, None] >= rect["y"] - dilation) &
              (cy[:, None] <= rect["y"] + rect["h"] + dilation) &
              (cx[None, :] >= rect["x"] - dilation) &
              (cx[None, :] <= rect["x"] + rect["w"] + dilation))
    total = grid[top].sum()
    return float(grid[top & inside].sum() / total) if total > 0 else 0.0


# ---------------------------------------------------------------------------
# scriptable tile server
# ---------------------------------------------------------------------------

def solid_tile_png(r, g, b, size=256):
    img = Image.new("RGB", (size, size), (r % 256, g % 256, b % 256))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class TileTestServer:
    """Local HTTP tile server with per-path scripted responses.

    Unscripted paths serve a deterministic solid-color PNG derived from the
    tile coordinates. Every request is recorded.
    """

    def __init__(self):
        server = self
        self._lock = threading.Lock()
        self.requests = []
        self.scripts = {}     # path -> list of (status, body|None); popped per request
        self.delay_s = 0.0

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_GET(self):
                with server._lock:
                    server.requests.append(self.path)
                    script = server.scripts.get(self.path)
                    step = script.pop(0) if script else None
                if server.delay_s:
                    import time
                    time.sleep(server.delay_s)
                if step is not None:
                    status, body = step
                    if body is None:
                        body = server.default_tile(self.path)
                    self.send_response(status)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                    return
                body = server.default_tile(self.path)
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self.httpd.server_address[1]
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    @staticmethod
    def default_tile(path):
        parts = [p for p in path.split("/") if p]
        try:
            z, x, y = int(parts[-3]), int(parts[-2]), int(parts[-1].split(".")[0])
        except (ValueError, IndexError):
            z = x = y = 0
        return solid_tile_png(37 * x + z, 59 * y, 11 * (x + y))

    @property
    def url_template(self):
        return f"http://127.0.0.1:{self.port}/tiles/{{z}}/{{x}}/{{y}}.png"

    def path_for(self, tile):
        return f"/tiles/{tile.zoom}/{tile.x}/{tile.y}.png"

    def count(self, path=None):
        with self._lock:
            if path is None:
                return len(self.requests)
            return sum(1 for p in self.requests if p == path)

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()
