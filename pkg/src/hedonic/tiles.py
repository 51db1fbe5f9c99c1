"""Web-Mercator tile client: coordinate math, quadkeys, cached fetching,
and stitching a fixed ground extent around a property into a model patch.

The crop is sized in ground meters at the property's latitude, so the same
metric extent is honored at any latitude. Tiles are 256 px Web-Mercator
standard; the URL template works with any XYZ or quadkey tile server.
"""

from __future__ import annotations

import io
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import (
    PatchError,
    PermanentFetchError,
    TileContentError,
    TransientFetchError,
)

TILE_SIZE = 256
EARTH_RADIUS_M = 6378137.0  # WGS-84 semi-major axis
LAT_LIMIT = 85.05112878
MIN_ZOOM, MAX_ZOOM = 1, 23
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
API_KEY_ENV = "HEDONIC_TILE_API_KEY"


@dataclass(frozen=True)
class TileCoord:
    x: int
    y: int
    zoom: int

    def __post_init__(self):
        if not (MIN_ZOOM <= self.zoom <= MAX_ZOOM):
            raise ValueError(f"zoom {self.zoom} outside [{MIN_ZOOM}, {MAX_ZOOM}]")
        if not (0 <= self.x < 2 ** self.zoom and 0 <= self.y < 2 ** self.zoom):
            raise ValueError(f"tile ({self.x}, {self.y}) outside zoom-{self.zoom} grid")

    def __str__(self):
        return f"{self.zoom}/{self.x}/{self.y}"


def _clip(v, lo, hi):
    return min(max(v, lo), hi)


def map_size(zoom: int) -> int:
    return TILE_SIZE * (1 << zoom)


def latlon_to_pixel_xy(lat: float, lon: float, zoom: int):
    """Global pixel coordinates of a WGS-84 point at the given zoom.

    Inputs are clipped to the Mercator-valid range; outputs are clamped to
    [0, map_size - 1].
    """
    lat = _clip(lat, -LAT_LIMIT, LAT_LIMIT)
    lon = _clip(lon, -180.0, 180.0)
    m = map_size(zoom)
    px = (lon + 180.0) / 360.0 * m
    siny = math.sin(math.radians(lat))
    py = (0.5 - math.log((1.0 + siny) / (1.0 - siny)) / (4.0 * math.pi)) * m
    return _clip(px, 0.0, m - 1.0), _clip(py, 0.0, m - 1.0)


def pixel_to_tile(px: float, py: float, zoom: int):
    """Containing tile and the in-tile pixel offset."""
    tx = int(px // TILE_SIZE)
    ty = int(py // TILE_SIZE)
    return TileCoord(tx, ty, zoom), (px - tx * TILE_SIZE, py - ty * TILE_SIZE)


def tile_to_quadkey(tile: TileCoord) -> str:
    """Interleave the x/y bits, one base-4 digit per zoom level."""
    digits = []
    for i in range(tile.zoom, 0, -1):
        mask = 1 << (i - 1)
        digit = 0
        if tile.x & mask:
            digit += 1
        if tile.y & mask:
            digit += 2
        digits.append(str(digit))
    return "".join(digits)


def quadkey_to_tile(quadkey: str) -> TileCoord:
    """Exact inverse of tile_to_quadkey."""
    zoom = len(quadkey)
    if zoom == 0:
        raise ValueError("empty quadkey")
    x = y = 0
    for i, ch in enumerate(quadkey):
        if ch not in "0123":
            raise ValueError(f"invalid quadkey digit {ch!r} in {quadkey!r}")
        mask = 1 << (zoom - 1 - i)
        d = int(ch)
        if d & 1:
            x |= mask
        if d & 2:
            y |= mask
    return TileCoord(x, y, zoom)


def ground_resolution(lat: float, zoom: int) -> float:
    """Meters of ground per map pixel at the given latitude and zoom."""
    lat = _clip(lat, -LAT_LIMIT, LAT_LIMIT)
    return math.cos(math.radians(lat)) * 2.0 * math.pi * EARTH_RADIUS_M / map_size(zoom)


# ---------------------------------------------------------------------------
# fetching
# ---------------------------------------------------------------------------

@dataclass
class TileClientConfig:
    tile_url_template: str
    cache_dir: str
    max_rps: float = 4.0
    max_inflight: int = 4
    api_key: str | None = None     # falls back to the HEDONIC_TILE_API_KEY env var
    timeout_s: float = 10.0
    max_retries: int = 3
    backoff_s: float = 0.5

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class _RateLimiter:
    def __init__(self, max_rps: float):
        self._interval = 1.0 / max_rps if max_rps and max_rps > 0 else 0.0
        self._lock = threading.Lock()
        self._next_allowed = 0.0

    def acquire(self):
        if self._interval == 0.0:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next_allowed - now
            self._next_allowed = max(now, self._next_allowed) + self._interval
        if wait > 0:
            time.sleep(wait)


class TileClient:
    """Disk-cached, rate-limited tile fetcher with single-flight downloads."""

    def __init__(self, config: TileClientConfig, session: requests.Session | None = None):
        self.config = config
        self.cache_dir = Path(config.cache_dir)
        self._session = session or requests.Session()
        self._limiter = _RateLimiter(config.max_rps)
        self._flight_lock = threading.Lock()
        self._tile_locks = {}
        self._stats_lock = threading.Lock()
        self.network_calls = 0

    def cache_path(self, tile: TileCoord) -> Path:
        return self.cache_dir / str(tile.zoom) / str(tile.x) / f"{tile.y}.png"

    def _tile_lock(self, tile: TileCoord) -> threading.Lock:
        with self._flight_lock:
            lock = self._tile_locks.get(tile)
            if lock is None:
                lock = self._tile_locks[tile] = threading.Lock()
            return lock

    def _url(self, tile: TileCoord) -> str:
        key = self.config.api_key if self.config.api_key is not None \
            else os.environ.get(API_KEY_ENV, "")
        return self.config.tile_url_template.format(
            quadkey=tile_to_quadkey(tile), z=tile.zoom, x=tile.x, y=tile.y, key=key)

    def fetch_tile(self, tile: TileCoord) -> bytes:
        """Cached PNG bytes for one tile; downloads and caches on a miss.

        4xx responses are permanent and never retried; 5xx and timeouts are
        retried with exponential backoff. Non-PNG bodies are errors and are
        never written to the cache.
        """
        path = self.cache_path(tile)
        if path.exists():
            return path.read_bytes()
        with self._tile_lock(tile):
            if path.exists():  # a concurrent fetch completed while we waited
                return path.read_bytes()
            body = self._download(tile)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(body)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            return body

    def _download(self, tile: TileCoord) -> bytes:
        url = self._url(tile)
        last_error = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                time.sleep(self.config.backoff_s * (2 ** (attempt - 1)))
            self._limiter.acquire()
            with self._stats_lock:
                self.network_calls += 1
            try:
                resp = self._session.get(url, timeout=self.config.timeout_s)
            except requests.RequestException as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if 400 <= resp.status_code < 500:
                raise PermanentFetchError(f"tile {tile}: HTTP {resp.status_code}")
            if resp.status_code != 200:
                last_error = f"HTTP {resp.status_code}"
                continue
            if not resp.content.startswith(PNG_SIGNATURE):
                raise TileContentError(f"tile {tile}: response body is not a PNG")
            return resp.content
        raise TransientFetchError(
            f"tile {tile}: giving up after {self.config.max_retries} retries ({last_error})")


def compose_patch(lat: float, lon: float, client: TileClient, zoom: int = 16,
                  extent_m: float = 600.0, out_size: int = 256) -> np.ndarray:
    """Stitch the extent_m x extent_m ground square centered on (lat, lon).

    Fetches every intersecting tile, crops the metric square, and bilinearly
    resamples to (3, out_size, out_size) float32 in [0, 1].
    """
    res = ground_resolution(lat, zoom)
    side = max(1, round(extent_m / res))
    cx, cy = latlon_to_pixel_xy(lat, lon, zoom)
    m = map_size(zoom)
    x0 = int(_clip(round(cx - side / 2), 0, max(0, m - side)))
    y0 = int(_clip(round(cy - side / 2), 0, max(0, m - side)))

    tx0, tx1 = x0 // TILE_SIZE, (x0 + side - 1) // TILE_SIZE
    ty0, ty1 = y0 // TILE_SIZE, (y0 + side - 1) // TILE_SIZE
    coords = [TileCoord(tx, ty, zoom)
              for ty in range(ty0, ty1 + 1) for tx in range(tx0, tx1 + 1)]

    results, failures = {}, []
    with ThreadPoolExecutor(max_workers=max(1, client.config.max_inflight)) as pool:
        futures = {pool.submit(client.fetch_tile, c): c for c in coords}
        for fut, coord in futures.items():
            try:
                results[coord] = fut.result()
            except (PermanentFetchError, TransientFetchError, TileContentError):
                failures.append(coord)
    if failures:
        raise PatchError(sorted(failures, key=lambda t: (t.y, t.x)))

    canvas = np.zeros((side, side, 3), dtype=np.uint8)
    for coord, body in results.items():
        tile_px = np.asarray(Image.open(io.BytesIO(body)).convert("RGB"))
        ox = coord.x * TILE_SIZE - x0
        oy = coord.y * TILE_SIZE - y0
        sx0, sy0 = max(0, -ox), max(0, -oy)
        dx0, dy0 = max(0, ox), max(0, oy)
        w = min(TILE_SIZE - sx0, side - dx0)
        h = min(TILE_SIZE - sy0, side - dy0)
        if w > 0 and h > 0:
            canvas[dy0:dy0 + h, dx0:dx0 + w] = tile_px[sy0:sy0 + h, sx0:sx0 + w]

    img = Image.fromarray(canvas)
    if side != out_size:
        img = img.resize((out_size, out_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))
