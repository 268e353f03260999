"""Generate a small synthetic corpus, inspect its labels and write it to disk."""

import tempfile

from slagrade.corpus import (GenConfig, apply_label_dropout, generate_corpus, label_statistics,
                             noise_floor, read_corpus, write_corpus)

cfg = GenConfig()
sessions = generate_corpus(64, seed=7, cfg=cfg)
s = sessions[0]
print(f"session {s.session_id}: {len(s.responses)} responses, labels {s.labels.as_tuple()}")
for r in s.responses[:3]:
    print(f"  {r.part}#{r.index_in_part}: {r.t_frames} frames, {r.duration_s:.0f}s, prompt {r.prompt_text!r}")

for target, stats in label_statistics(sessions).items():
    print(f"{target:>8}: mean {stats['mean']:.2f} sd {stats['std']:.2f}")
print("noise floor:", {k: round(v, 3) for k, v in noise_floor(cfg).items()})

dropped = apply_label_dropout(sessions, p_drop=0.3, seed=1)
print("fully labelled after dropout:", sum(all(x.mask) for x in dropped), "of", len(dropped))

with tempfile.TemporaryDirectory() as d:
    write_corpus(sessions, d)
    assert read_corpus(d) == sessions
    print("round trip ok")
