"""End-to-end command-line run on a tiny synthetic dataset.

Writes raw files to a temporary directory, then runs
``prepare -> pretrain -> train -> eval -> export`` through ``python -m imf``.
"""

# %%
import json
import subprocess
import sys
import tempfile
from pathlib import Path

from imf.synthetic import make_synthetic_kg, write_synthetic

work = Path(tempfile.mkdtemp(prefix="imf-demo-"))
kg = make_synthetic_kg(num_entities=60, seed=1, groups=4, joint_groups=3, heads_per_relation=15)
paths = write_synthetic(kg, work / "raw")


def imf(*args):
    print("$ imf", " ".join(str(a) for a in args))
    done = subprocess.run([sys.executable, "-m", "imf", *map(str, args)], capture_output=True, text=True)
    print(done.stdout.rstrip() or "(no output)")
    if done.returncode:
        print(done.stderr)
        raise SystemExit(done.returncode)


# %% [markdown]
# ``prepare`` validates the raw files, indexes names and converts the
# features into the binary matrix format.

# %%
imf("prepare", "--dataset", work / "raw", "--out", work / "data",
    "--features-struct", paths["s"], "--features-visual", paths["v"], "--features-text", paths["t"])

# %% [markdown]
# ``pretrain`` replaces the structural features with graph-attention
# embeddings learned from the training triples.

# %%
imf("pretrain", "--dataset", work / "data", "--out", work / "gat", "--dim", 16, "--epochs", 20, "--lr", 0.01)

# %%
imf("train", "--dataset", work / "data", "--features-struct", work / "gat" / "struct.mmft",
    "--out", work / "run", "--dim", 24, "--rel-dim", 8, "--epochs", 30, "--lr", 0.005,
    "--contrastive-weight", 0.01, "--eval-every", 5)
imf("eval", "--out", work / "run", "--dump-ranks")
imf("export", "--out", work / "run", "--modality", "contextual", "--relation", "joint_0",
    "--output", work / "run" / "joint0.mmft")

# %%
report = json.loads((work / "run" / "test_report.json").read_text())
print("test MRR", round(report["both"]["MRR"], 3))
print("artefacts:", sorted(p.name for p in (work / "run").iterdir()))
