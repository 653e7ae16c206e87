"""Parse best-track text, build a feature window and a storm-centred GPH stack.

Run: python3 demos/01_tracks_and_windows.py
"""
import io

import numpy as np

from tcfusion.bst import parse_bst, serialize_bst
from tcfusion.gph import crop_gph
from tcfusion.samples import FACTOR_NAMES, build_feature_window, make_samples, target_deltas
from tcfusion.synth import SynthConfig, synth_world

RECORDS = """\
66666 0000   5 0001 0000 0 6 (nameless) 19530615
1953061506 0 125 1116 1000 10 15
1953061512 0 132 1117 1000 10 15
1953061518 0 142 1117 1000 10 15
1953061600 0 150 1117 1000 10 20
1953061606 0 159 1112 999 10 20
"""

parsed = parse_bst(io.StringIO(RECORDS))
track = parsed.tracks[0]
print(f"storm {track.storm_id}: {len(track)} records, issues={len(parsed.issues)}")
for ob in track.observations:
    print(f"  {ob.timestamp:%Y-%m-%d %HZ}  lat {ob.lat:5.1f}  lon {ob.lon:6.1f}  {ob.pressure:.0f} hPa  {ob.max_wind:.0f} m/s")
print("round trip identical:", parse_bst(io.StringIO(serialize_bst(parsed.tracks))).tracks == parsed.tracks)

# a synthetic storm has enough history for full windows (t - m - 4 >= 0)
world = synth_world(SynthConfig(n_storms=1, duration_steps=(24, 24)), seed=1)
storm = world.tracks[0]
t = 10
window = build_feature_window(storm, t, m=4)
print(f"\nfeature window at index {t} of {storm.storm_id} (columns: {', '.join(FACTOR_NAMES)})")
print(np.array2string(window.values, precision=2, suppress_small=True))
print("targets (dlat, dlon) for +6..+24 h:")
print(np.array2string(target_deltas(storm, t, 4), precision=2))

ob = storm.observations[t]
grid = crop_gph(world.source, (ob.lat, ob.lon), ob.timestamp, q=25, resolution=None)
print(f"\n25x25 crop around ({ob.lat:.1f}, {ob.lon:.1f}): {grid.min():.0f}..{grid.max():.0f} gpm, "
      f"centre {grid[12, 12]:.0f}")

samples = make_samples(world.tracks, world.source, q=25)
print(f"{len(samples)} samples; first GPH stack {samples[0].gph.grids.shape}, "
      f"future stack {samples[0].target_gph.shape}")
