"""Synthetic latent scenes and their feature bundles.

A scene is a handful of objects, each with a class, a patch-grid cell,
per-segment audibility/visibility, and (for segmentation scenes) a pixel
extent radius. Features follow directly: a segment's audio vector is the
sum of the audible classes' audio prototypes plus noise; a visible
object adds its visual prototype to its cell (spread over neighboring
cells by disk overlap when it has extent); the frame feature is the
patch mean. Class prototypes are unit vectors drawn once per world seed,
so every scene from the same world is solvable by the same model.

Labels derive from the latent description, never from the features:
  event localization    class while audible AND visible, else background
  video parsing         per-modality per-class presence grids
  sound localization    cell of the sounding visible object, silent -> -1
  segmentation          the sounding object's disk at segment 0
  question answering    "is class k audible" (no=0/yes=1), "how many
                        distinct classes sound" (counts at 2..5), "which
                        side is the sounding object on" (left=6/right=7)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import Bundle
from .config import ModelConfig
from .errors import ContractError
from .prompting import template_vector
from .tokens import Task, UNLABELED

ANS_NO = 0
ANS_YES = 1
ANS_COUNT0 = 2   # counts 0..3 sit at 2..5
ANS_LEFT = 6
ANS_RIGHT = 7


@dataclass
class SceneObject:
    cls: int
    patch: int
    audible: np.ndarray      # (T,) bool
    visible: np.ndarray      # (T,) bool
    radius: float = 0.0      # pixel extent at mask scale; 0 = one cell


@dataclass
class LatentScene:
    task: Task
    objects: list = field(default_factory=list)
    question: dict | None = None

    def sounding(self):
        """Objects audible at any point, in placement order."""
        return [o for o in self.objects if o.audible.any()]


class SceneGenerator:
    """Scene factory bound to one world (one prototype set)."""

    def __init__(self, config: ModelConfig = None, world_seed=0, sigma=0.1):
        self.config = config or ModelConfig()
        self.sigma = float(sigma)
        self.world_seed = int(world_seed)
        rng = np.random.default_rng(424_200 + self.world_seed)
        K = self.config.n_classes

        def unit_rows(n, d):
            m = rng.normal(size=(n, d))
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        self.audio_protos = unit_rows(K, self.config.d_audio)
        self.visual_protos = unit_rows(K, self.config.d_visual)

    # ----- latent scene construction ------------------------------------

    def _interval(self, rng, min_len=2):
        T = self.config.n_segments
        length = int(rng.integers(min_len, T + 1))
        t0 = int(rng.integers(0, T - length + 1))
        on = np.zeros(T, dtype=bool)
        on[t0:t0 + length] = True
        return on

    def _scene_ave(self, rng):
        T = self.config.n_segments
        cls = int(rng.integers(self.config.n_classes))
        on = self._interval(rng)
        patch = int(rng.integers(self.config.n_patches))
        draw = rng.random()
        # mostly true audio-visual events; sometimes single-modality ones,
        # which the labels call background throughout
        audible = on.copy() if draw < 0.85 else np.zeros(T, dtype=bool)
        visible = on.copy() if (draw < 0.70 or draw >= 0.85) else np.zeros(T, dtype=bool)
        return LatentScene(Task.AVE, [SceneObject(cls, patch, audible, visible)])

    def _scene_avvp(self, rng):
        K = self.config.n_classes
        n = int(rng.integers(1, 3))
        classes = rng.choice(K, size=n, replace=False)
        patches = rng.choice(self.config.n_patches, size=n, replace=False)
        objects = []
        for cls, patch in zip(classes, patches):
            audible = self._interval(rng)
            visible = self._interval(rng)
            objects.append(SceneObject(int(cls), int(patch), audible, visible))
        return LatentScene(Task.AVVP, objects)

    def _scene_ssl(self, rng):
        T = self.config.n_segments
        n_cells = 2 if rng.random() < 0.5 else 1
        cells = rng.choice(self.config.n_patches, size=n_cells, replace=False)
        classes = rng.choice(self.config.n_classes, size=n_cells, replace=False)
        objects = [SceneObject(int(classes[0]), int(cells[0]),
                               self._interval(rng), np.ones(T, dtype=bool))]
        if n_cells == 2:
            # a silent look-alike: localization has to listen
            objects.append(SceneObject(int(classes[1]), int(cells[1]),
                                       np.zeros(T, dtype=bool),
                                       np.ones(T, dtype=bool)))
        return LatentScene(Task.SSL, objects)

    def _scene_avs(self, rng):
        cfg = self.config
        T = cfg.n_segments
        cell = cfg.mask_hw // cfg.grid
        cls = int(rng.integers(cfg.n_classes))
        patch = int(rng.integers(cfg.n_patches))
        audible = self._interval(rng)
        audible[0] = True  # the annotated segment must be sounding
        radius = float(rng.uniform(0.4, 0.9) * cell)
        target = SceneObject(cls, patch, audible, np.ones(T, dtype=bool),
                             radius=radius)
        objects = [target]
        if rng.random() < 0.5:
            # a silent distractor the mask must exclude
            others = [p for p in range(cfg.n_patches) if p != patch]
            d_cls = int(rng.choice(
                [k for k in range(cfg.n_classes) if k != cls]))
            objects.append(SceneObject(
                d_cls, int(rng.choice(others)),
                np.zeros(T, dtype=bool), np.ones(T, dtype=bool),
                radius=float(rng.uniform(0.4, 0.9) * cell)))
        return LatentScene(Task.AVS, objects)

    def _scene_avqa(self, rng):
        cfg = self.config
        T, K = cfg.n_segments, cfg.n_classes
        draw = rng.random()
        qtype = "exist" if draw < 0.5 else ("count" if draw < 0.75 else "where")
        if qtype == "where":
            n_aud = 1
        elif qtype == "count":
            n_aud = int(rng.integers(0, 4))
        else:
            n_aud = int(rng.integers(0, 3))
        n_vis = int(rng.random() < 0.5)  # a visible-but-silent extra
        total = n_aud + n_vis
        classes = rng.choice(K, size=total, replace=False) if total else []
        patches = rng.choice(cfg.n_patches, size=total, replace=False) if total else []
        objects = []
        for i in range(total):
            audible = (np.ones(T, dtype=bool) if i < n_aud
                       else np.zeros(T, dtype=bool))
            objects.append(SceneObject(int(classes[i]), int(patches[i]),
                                       audible, np.ones(T, dtype=bool)))
        if qtype == "exist":
            audible_cls = sorted({o.cls for o in objects if o.audible.any()})
            if audible_cls and rng.random() < 0.5:
                cls_q = int(rng.choice(audible_cls))
                answer = ANS_YES
            else:
                silent_cls = sorted(set(range(K)) - set(audible_cls))
                cls_q = int(rng.choice(silent_cls))
                answer = ANS_NO
            question = {"type": "exist", "cls": cls_q, "answer": answer,
                        "template": 4 + cls_q}
        elif qtype == "count":
            question = {"type": "count", "answer": ANS_COUNT0 + n_aud,
                        "template": 4 + K}
        else:
            col = objects[0].patch % cfg.grid
            answer = ANS_LEFT if col < cfg.grid // 2 else ANS_RIGHT
            question = {"type": "where", "answer": answer,
                        "template": 4 + K + 1}
        return LatentScene(Task.AVQA, objects, question)

    def make_scene(self, task, seed):
        """Build the latent scene for (task, seed); deterministic."""
        rng = np.random.default_rng(
            1_000_003 * (int(task) + 1) + int(seed))
        build = {Task.AVE: self._scene_ave, Task.AVVP: self._scene_avvp,
                 Task.SSL: self._scene_ssl, Task.AVS: self._scene_avs,
                 Task.AVQA: self._scene_avqa}[Task(task)]
        return build(rng)

    # ----- geometry ------------------------------------------------------

    def disk_mask(self, patch, radius):
        """(H, H) uint8 raster of a filled disk centered on a cell."""
        cfg = self.config
        H = cfg.mask_hw
        cell = H // cfg.grid
        r, c = divmod(int(patch), cfg.grid)
        cy, cx = (r + 0.5) * cell, (c + 0.5) * cell
        yy, xx = np.mgrid[0:H, 0:H]
        d2 = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2
        return (d2 <= radius * radius).astype(np.uint8)

    def patch_mask(self, patch):
        """(H, H) uint8 footprint of one full grid cell."""
        cfg = self.config
        H = cfg.mask_hw
        cell = H // cfg.grid
        r, c = divmod(int(patch), cfg.grid)
        m = np.zeros((H, H), dtype=np.uint8)
        m[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = 1
        return m

    def _cell_weights(self, patch, radius):
        """(M,) fraction of each cell covered by the object's disk."""
        cfg = self.config
        if radius <= 0:
            w = np.zeros(cfg.n_patches)
            w[patch] = 1.0
            return w
        H = cfg.mask_hw
        cell = H // cfg.grid
        disk = self.disk_mask(patch, radius).astype(np.float64)
        per_cell = disk.reshape(cfg.grid, cell, cfg.grid, cell)
        return per_cell.sum(axis=(1, 3)).reshape(-1) / (cell * cell)

    # ----- features and labels ------------------------------------------

    def features(self, scene, seed):
        """(audio (T,Da), frames (T,Dv), patches (T,M,Dv)) float32."""
        cfg = self.config
        rng = np.random.default_rng(77_000_001 + int(seed))
        T, M = cfg.n_segments, cfg.n_patches
        audio = rng.normal(0.0, self.sigma, (T, cfg.d_audio))
        patches = rng.normal(0.0, self.sigma, (T, M, cfg.d_visual))
        for obj in scene.objects:
            audio[obj.audible] += self.audio_protos[obj.cls]
            w = self._cell_weights(obj.patch, obj.radius)
            patches[obj.visible] += np.outer(w, self.visual_protos[obj.cls])
        frames = patches.mean(axis=1)
        return (audio.astype(np.float32), frames.astype(np.float32),
                patches.astype(np.float32))

    def labels(self, scene):
        cfg = self.config
        T, K = cfg.n_segments, cfg.n_classes
        task = scene.task
        if task == Task.AVE:
            obj = scene.objects[0]
            events = np.full(T, K, dtype=np.int64)
            events[obj.audible & obj.visible] = obj.cls
            return {"events": events, "n_classes": K}
        if task == Task.AVVP:
            audible = np.zeros((T, K), dtype=np.int64)
            visible = np.zeros((T, K), dtype=np.int64)
            for o in scene.objects:
                audible[o.audible, o.cls] = 1
                visible[o.visible, o.cls] = 1
            return {"audible": audible, "visible": visible}
        if task == Task.SSL:
            obj = scene.objects[0]
            on = obj.audible & obj.visible
            bins = np.where(on, obj.patch, -1).astype(np.int64)
            return {"bins": bins}
        if task == Task.AVS:
            obj = scene.sounding()[0]
            return {"masks": self.disk_mask(obj.patch, obj.radius)[None]}
        if task == Task.AVQA:
            return {"n_answers": cfg.n_answers,
                    "answer": scene.question["answer"],
                    "template": scene.question["template"]}
        raise ContractError(f"unknown task {task!r}")

    def prompt_for(self, scene):
        """(template id, raw vector) for the scene's task or question."""
        if scene.task == Task.AVQA:
            tid = scene.question["template"]
        else:
            tid = int(scene.task)
        return tid, template_vector(tid, self.config.d_text).astype(np.float32)

    def make_bundle(self, task, seed, labeled=True):
        """Scene -> Bundle; the same (task, seed) is byte-stable."""
        scene = self.make_scene(task, seed)
        audio, frames, patches = self.features(scene, seed)
        tid, raw = self.prompt_for(scene)
        cfg = self.config
        return Bundle(
            task=int(task) if labeled else UNLABELED,
            audio=audio, frames=frames, patches=patches,
            prompt_template=tid, prompt_raw=raw, d_text=cfg.d_text,
            mask_hw=(cfg.mask_hw, cfg.mask_hw),
            labels=self.labels(scene) if labeled else None,
        ), scene

    def make_dataset(self, task, n, seed0=0, labeled=True):
        """n bundles with consecutive seeds; returns (bundles, scenes)."""
        out = [self.make_bundle(task, seed0 + i, labeled=labeled)
               for i in range(n)]
        return [b for b, _ in out], [s for _, s in out]
