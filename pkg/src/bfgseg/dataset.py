"""Scene collections on disk: ``scenes/scene_NNN.txt`` plus ``manifest.json``."""
import json
import os

import numpy as np

from .errors import DataError
from .fewshot import SplitSpec, derive_seed
from .pointcloud import (LabeledCloud, SceneSpec, generate_scene, read_cloud, split_blocks,
                         write_cloud)

MANIFEST = "manifest.json"


def scene_spec(data_cfg, index):
    return SceneSpec(n_points=data_cfg.scene_points, room_size=data_cfg.room_size,
                     deformation=data_cfg.deformation, clutter_fraction=data_cfg.clutter_fraction,
                     color_noise=data_cfg.color_noise,
                     objects_per_scene=data_cfg.objects_per_scene, seed=derive_seed(data_cfg.seed, index),
                     block_sample=data_cfg.block_points)


def generate_scenes(data_cfg):
    return [generate_scene(scene_spec(data_cfg, i)) for i in range(data_cfg.n_scenes)]


def blocks_from_scenes(scenes, block_size):
    blocks, origin = [], []
    for si, scene in enumerate(scenes):
        for bi, block in enumerate(split_blocks(scene, block_size)):
            blocks.append(block)
            origin.append((si, bi))
    return blocks, origin


def build_manifest(data_cfg, scenes, blocks, origin):
    split = SplitSpec(data_cfg.split0, data_cfg.split1)
    names = SceneSpec().class_names
    block_rows = []
    for (si, bi), block in zip(origin, blocks):
        counts = block.class_counts()
        present = sorted(c for c, n in counts.items() if c > 0 and n >= data_cfg.min_points)
        block_rows.append({"scene": si, "block": bi, "n_points": len(block),
                           "class_counts": {str(c): n for c, n in sorted(counts.items())},
                           "classes": present})
    inventory = {}
    for name, classes in (("s0", split.s0), ("s1", split.s1)):
        inventory[name] = {str(c): sum(1 for r in block_rows if c in r["classes"]) for c in classes}
    return {
        "seed": data_cfg.seed,
        "n_scenes": len(scenes),
        "block_size": data_cfg.block_size,
        "min_points": data_cfg.min_points,
        "class_names": {str(k): v for k, v in names.items()},
        "splits": {"s0": list(split.s0), "s1": list(split.s1)},
        "scenes": [f"scenes/scene_{i:03d}.txt" for i in range(len(scenes))],
        "n_blocks": len(blocks),
        "blocks": block_rows,
        "split_inventory": inventory,
    }


def write_dataset(data_cfg, out_dir):
    scenes = generate_scenes(data_cfg)
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    for i, scene in enumerate(scenes):
        write_cloud(scene, os.path.join(out_dir, "scenes", f"scene_{i:03d}.txt"),
                    header=f"bfgseg synthetic scene {i} seed {data_cfg.seed}")
    # blocks are cut from the re-read files so in-memory and on-disk data agree
    scenes = [read_cloud(os.path.join(out_dir, "scenes", f"scene_{i:03d}.txt"))
              for i in range(len(scenes))]
    blocks, origin = blocks_from_scenes(scenes, data_cfg.block_size)
    manifest = build_manifest(data_cfg, scenes, blocks, origin)
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(data_dir):
    """Returns (blocks, manifest) for a directory written by :func:`write_dataset`."""
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no dataset at {data_dir} (missing {MANIFEST})")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    scenes = []
    for rel in manifest["scenes"]:
        full = os.path.join(data_dir, rel)
        try:
            scenes.append(_fast_read(full))
        except OSError as exc:
            raise DataError(f"cannot read scene {full}: {exc.strerror}") from None
    blocks, _ = blocks_from_scenes(scenes, manifest["block_size"])
    if len(blocks) != manifest["n_blocks"]:
        raise DataError(f"{data_dir}: manifest lists {manifest['n_blocks']} blocks, "
                        f"scenes split into {len(blocks)}")
    return blocks, manifest


def _fast_read(path):
    # np.loadtxt for speed; the line parser gives the precise error on failure
    try:
        arr = np.loadtxt(path, comments="#", ndmin=2)
        if arr.shape[1] != 7:
            raise ValueError
    except ValueError:
        return read_cloud(path)
    return LabeledCloud(arr[:, :3], arr[:, 6].astype(np.int64), arr[:, 3:6])


def in_memory_dataset(data_cfg):
    """Blocks for ``data_cfg`` without touching disk (values rounded to the file format's 6 decimals)."""
    scenes = []
    for s in generate_scenes(data_cfg):
        scenes.append(LabeledCloud(np.round(s.coords, 6), s.labels, np.round(s.colors, 6)))
    blocks, _ = blocks_from_scenes(scenes, data_cfg.block_size)
    return blocks
