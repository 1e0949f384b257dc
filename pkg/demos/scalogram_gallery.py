"""Render the scalogram of one window per impact zone on the axis the strike drives.

Each zone gets a different carrier band, so the bright ridge after the
impact sits at a different height: Port highest, Starboard lowest. Bow hits
show on surge (channel 1), side hits on sway (channel 2); the no-impact window
shows only sea-state texture.

    python demos/scalogram_gallery.py --out gallery/
"""

import argparse
from pathlib import Path

import numpy as np

from usvfog.signal_core import IMPACT_PATTERNS, WINDOW_S, ImpactLabel, ImpactScenario
from usvfog.harness.campaign import scenario_window
from usvfog.wavelet import DEFAULT_GRID, render_channel_png, scalogram_digest, window_scalogram

CARRIERS = {"Bow": 4.0, "Port": 6.2, "Starboard": 2.5, "None": 4.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("gallery"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    freqs = DEFAULT_GRID.frequencies
    for label, carrier in CARRIERS.items():
        sc = ImpactScenario(label=label, impact_t_s=2.0, carrier_hz=carrier, duration_s=float(WINDOW_S), rng_seed=21)
        window, _ = scenario_window(sc)
        scal = window_scalogram(window.channels())
        ch = int(np.argmax(np.abs(IMPACT_PATTERNS[ImpactLabel.parse(label)])))
        # strongest row after the strike, above the sea-state swell
        band = np.flatnonzero(freqs >= 1.5)
        ridge = band[int(np.argmax(scal[ch, band, 96:].max(axis=1)))]
        path = args.out / f"{label.lower()}_ch{ch + 1}.png"
        render_channel_png(scal, ch, path)
        print(f"{label:<9} ch{ch + 1} ridge near {freqs[ridge]:5.2f} Hz  digest {scalogram_digest(scal)[:12]}  -> {path}")


if __name__ == "__main__":
    main()
