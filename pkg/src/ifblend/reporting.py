"""Comparison grids: labeled side-by-side panels, one PNG per filename stem.

Labels are drawn from an embedded 5x7 pixel glyph table covering the
filename-safe charset (a-z, 0-9, dash, underscore, dot), so no font files or
text-rendering dependency is involved.
"""

from pathlib import Path

import numpy as np

from .data import load_image, save_image

_GLYPHS = {
    "a": ".###. #...# #...# ##### #...# #...# #...#",
    "b": "####. #...# ####. #...# #...# #...# ####.",
    "c": ".###. #...# #.... #.... #.... #...# .###.",
    "d": "####. #...# #...# #...# #...# #...# ####.",
    "e": "##### #.... ####. #.... #.... #.... #####",
    "f": "##### #.... ####. #.... #.... #.... #....",
    "g": ".###. #...# #.... #.### #...# #...# .###.",
    "h": "#...# #...# ##### #...# #...# #...# #...#",
    "i": "##### ..#.. ..#.. ..#.. ..#.. ..#.. #####",
    "j": "..### ...#. ...#. ...#. ...#. #..#. .##..",
    "k": "#...# #..#. ###.. #.#.. #..#. #...# #...#",
    "l": "#.... #.... #.... #.... #.... #.... #####",
    "m": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "n": "#...# ##..# #.#.# #..## #...# #...# #...#",
    "o": ".###. #...# #...# #...# #...# #...# .###.",
    "p": "####. #...# #...# ####. #.... #.... #....",
    "q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "r": "####. #...# #...# ####. #.#.. #..#. #...#",
    "s": ".#### #.... #.... .###. ....# ....# ####.",
    "t": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "u": "#...# #...# #...# #...# #...# #...# .###.",
    "v": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "w": "#...# #...# #...# #.#.# #.#.# ##.## #...#",
    "x": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "z": "##### ....# ...#. ..#.. .#... #.... #####",
    "0": ".###. #...# #..## #.#.# ##..# #...# .###.",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. #####",
    "2": ".###. #...# ....# ..##. .#... #.... #####",
    "3": ".###. #...# ....# ..##. ....# #...# .###.",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ....# #...# .###.",
    "6": ".###. #.... #.... ####. #...# #...# .###.",
    "7": "##### ....# ...#. ..#.. .#... .#... .#...",
    "8": ".###. #...# #...# .###. #...# #...# .###.",
    "9": ".###. #...# #...# .#### ....# ....# .###.",
    "-": "..... ..... ..... ##### ..... ..... .....",
    "_": "..... ..... ..... ..... ..... ..... #####",
    ".": "..... ..... ..... ..... ..... .##.. .##..",
    " ": "..... ..... ..... ..... ..... ..... .....",
}


def sanitize_label(text: str) -> str:
    return "".join(c if c in _GLYPHS else "-" for c in str(text).lower())


def render_label(text: str, width: int, scale: int = 2) -> np.ndarray:
    """White-on-dark pixel strip of the sanitized label, cropped to width."""
    text = sanitize_label(text)
    strip = np.zeros((7, max(1, 6 * len(text) - 1)))
    for i, ch in enumerate(text):
        rows = _GLYPHS[ch].split()
        for r, row in enumerate(rows):
            for c, cell in enumerate(row):
                if cell == "#":
                    strip[r, 6 * i + c] = 1.0
    strip = np.kron(strip, np.ones((scale, scale)))
    canvas = np.full((strip.shape[0] + 2 * scale, width), 0.1)
    w = min(width - 2, strip.shape[1])
    if w > 0:
        canvas[scale : scale + strip.shape[0], 1 : 1 + w] = np.where(
            strip[:, :w] > 0, 0.95, 0.1
        )
    return canvas


def _as_rgb(img):
    if img.ndim == 2:
        return np.stack([img] * 3, axis=2)
    return img


def compose_grid(panels, pad: int = 4) -> np.ndarray:
    """One row of labeled columns: [(label, HxWx3 float image), ...]."""
    height = max(img.shape[0] for _, img in panels)
    columns = []
    for label, img in panels:
        img = _as_rgb(img)
        if img.shape[0] < height:
            img = np.pad(img, ((0, height - img.shape[0]), (0, 0), (0, 0)))
        strip = render_label(label, img.shape[1])
        column = np.concatenate([_as_rgb(strip), img], axis=0)
        columns.append(column)
    spacer = np.full((columns[0].shape[0], pad, 3), 0.5)
    out = []
    for i, col in enumerate(columns):
        if i:
            out.append(spacer)
        out.append(col)
    return np.concatenate(out, axis=1)


def write_grids(labeled_dirs, out_dir) -> list:
    """One comparison PNG per stem across the given (label, directory) pairs.

    Every directory must contain the same stems; missing ones are reported
    by name.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems_per_dir = []
    for label, directory in labeled_dirs:
        directory = Path(directory)
        stems_per_dir.append(
            {p.stem for p in directory.iterdir() if p.suffix.lower() == ".png"}
        )
    common = set.intersection(*stems_per_dir) if stems_per_dir else set()
    union = set.union(*stems_per_dir) if stems_per_dir else set()
    if common != union:
        missing = sorted(union - common)
        raise ValueError(f"stems missing from some directories: {missing}")
    written = []
    for stem in sorted(common):
        panels = []
        for label, directory in labeled_dirs:
            img, _ = load_image(Path(directory) / f"{stem}.png")
            panels.append((label, _as_rgb(img)))
        grid = compose_grid(panels)
        target = out_dir / f"{stem}.png"
        save_image(target, grid)
        written.append(target)
    return written
