"""Branched multi-objective CNN: shared conv trunk, four output heads.

Every layer carries exactly one stage tag that drives transfer learning:
trunk_frozen layers never move after pretraining, stage1_trainable layers
are the only ones updated in transfer stage 1, and stage2_unlockable
layers join them in stage 2.
"""

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .losses import PROB_EPS
from .robots import get_model

GROUPS = ("trunk_frozen", "stage2_unlockable", "stage1_trainable")
MAX_JOINTS = 7
DESK_INPUT_HW = (106, 128)
PAPER_INPUT_HW = (212, 256)


class DescriptorError(ValueError):
    """Inconsistent architecture descriptor."""


@dataclass
class ArchitectureDescriptor:
    input_hw: tuple
    trunk: list                        # conv layer dicts, in order
    heads: dict                        # head name -> list of layer dicts
    max_joints: int = MAX_JOINTS

    def all_layers(self):
        out = list(self.trunk)
        for name in ("mask", "joints", "base", "type"):
            out.extend(self.heads[name])
        return out

    def validate(self):
        names = set()
        for layer in self.all_layers():
            if layer["group"] not in GROUPS:
                raise DescriptorError(f"layer {layer['name']}: unknown group {layer['group']}")
            if layer["name"] in names:
                raise DescriptorError(f"duplicate layer name {layer['name']}")
            names.add(layer["name"])
        if self.heads["mask"][-1]["cout"] != 1:
            raise DescriptorError("mask head must end in a single channel")
        if self.heads["joints"][-1]["fout"] != 3 * self.max_joints:
            raise DescriptorError(
                f"joints head must end at {3 * self.max_joints} units")
        if self.heads["base"][-1]["fout"] != 3:
            raise DescriptorError("base head must end at 3 units")
        return self

    def trunk_output_shape(self):
        h, w = self.input_hw
        c = self.trunk[-1]["cout"]
        for layer in self.trunk:
            if layer.get("pool"):
                h, w = h // 2, w // 2
        return c, h, w

    def num_classes(self):
        return self.heads["type"][-1]["fout"]

    def as_dict(self):
        return {"input_hw": list(self.input_hw), "trunk": self.trunk,
                "heads": self.heads, "max_joints": self.max_joints}

    @staticmethod
    def from_dict(d):
        return ArchitectureDescriptor(
            input_hw=tuple(d["input_hw"]), trunk=d["trunk"], heads=d["heads"],
            max_joints=int(d.get("max_joints", MAX_JOINTS))).validate()


def _conv(name, cin, cout, group, act="relu", pool=False, upsample=False):
    return {"name": name, "kind": "conv", "cin": cin, "cout": cout, "k": 3,
            "pad": 1, "act": act, "pool": pool, "upsample": upsample, "group": group}


def _dense(name, fin, fout, group, act=None):
    return {"name": name, "kind": "dense", "fin": fin, "fout": fout,
            "act": act, "group": group}


def desk_architecture(input_hw=DESK_INPUT_HW, num_classes=3):
    """Default desk-scale descriptor; trainable on a laptop CPU."""
    trunk = [
        _conv("conv1", 3, 8, "trunk_frozen", pool=True),
        _conv("conv2", 8, 16, "trunk_frozen", pool=True),
        _conv("conv3", 16, 32, "trunk_frozen", pool=True),
        _conv("conv4", 32, 32, "stage2_unlockable", pool=True),
    ]
    desc = ArchitectureDescriptor(input_hw=tuple(input_hw), trunk=trunk, heads={})
    c, h, w = desc.trunk_output_shape()
    flat = c * h * w
    desc.heads = {
        "mask": [
            _conv("mask_conv1", 32, 32, "stage2_unlockable"),
            _conv("mask_conv2", 32, 16, "stage2_unlockable"),
            _conv("mask_up1", 16, 16, "stage2_unlockable", upsample=True),
            _conv("mask_up2", 16, 8, "stage2_unlockable", upsample=True),
            _conv("mask_out", 8, 1, "stage1_trainable", act="sigmoid"),
        ],
        "joints": [
            _dense("joints_fc1", flat, 128, "stage2_unlockable", act="relu"),
            _dense("joints_out", 128, 3 * MAX_JOINTS, "stage1_trainable"),
        ],
        "base": [
            _dense("base_fc1", flat, 128, "stage2_unlockable", act="relu"),
            _dense("base_out", 128, 3, "stage1_trainable"),
        ],
        "type": [
            _dense("type_fc1", flat, 128, "stage2_unlockable", act="relu"),
            _dense("type_out", 128, int(num_classes), "stage1_trainable", act="softmax"),
        ],
    }
    return desc.validate()


@dataclass
class NetworkOutputs:
    mask_prob: object    # [B,1,H,W] in (0,1)
    joints: object       # [B,max_joints,3] meters, camera frame
    base: object         # [B,3]
    type_dist: object    # [B,R], rows sum to 1


class Network:
    """Parameters plus the forward interpreter for a descriptor."""

    def __init__(self, descriptor, classes, params, groups):
        self.descriptor = descriptor
        self.classes = list(classes)
        self.params = params            # name -> Tensor, insertion-ordered
        self.groups = groups            # param name -> stage tag

    @staticmethod
    def build(descriptor, classes, seed):
        """He-style fan-in uniform weights, zero biases, float32."""
        descriptor.validate()
        if descriptor.num_classes() != len(classes):
            raise DescriptorError(
                f"type head width {descriptor.num_classes()} != {len(classes)} classes")
        rng = np.random.default_rng(seed)
        params = {}
        groups = {}
        for layer in descriptor.all_layers():
            if layer["kind"] == "conv":
                fan_in = layer["cin"] * layer["k"] * layer["k"]
                shape = (layer["cout"], layer["cin"], layer["k"], layer["k"])
                bshape = (layer["cout"],)
            else:
                fan_in = layer["fin"]
                shape = (layer["fin"], layer["fout"])
                bshape = (layer["fout"],)
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, shape).astype(np.float32)
            params[layer["name"] + ".w"] = Tensor(w, trainable=True, name=layer["name"] + ".w")
            params[layer["name"] + ".b"] = Tensor(np.zeros(bshape, np.float32),
                                                  trainable=True, name=layer["name"] + ".b")
            groups[layer["name"] + ".w"] = layer["group"]
            groups[layer["name"] + ".b"] = layer["group"]
        return Network(descriptor, classes, params, groups)

    # -- parameter bookkeeping --

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def set_trainable_groups(self, groups):
        """Freeze every parameter whose stage tag is not in `groups`."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown layer groups {sorted(unknown)}")
        for name, p in self.params.items():
            p.frozen = self.groups[name] not in groups

    def group_blobs(self):
        """Stage tag -> concatenated parameter bytes (for freeze audits)."""
        out = {g: [] for g in GROUPS}
        for name, p in self.params.items():
            out[self.groups[name]].append(p.values.tobytes())
        return {g: b"".join(chunks) for g, chunks in out.items()}

    # -- forward --

    def _apply_conv(self, g, x, layer):
        if layer.get("upsample"):
            x = g.nearest_upsample2x(x)
        x = g.conv2d(x, self.params[layer["name"] + ".w"],
                     self.params[layer["name"] + ".b"], padding=layer["pad"])
        if layer["act"] == "relu":
            x = g.relu(x)
        elif layer["act"] == "sigmoid":
            x = g.clip(g.sigmoid(x), PROB_EPS, 1.0 - PROB_EPS)
        if layer.get("pool"):
            x = g.max_pool2x2(x)
        return x

    def _apply_dense(self, g, x, layer):
        x = g.dense(x, self.params[layer["name"] + ".w"], self.params[layer["name"] + ".b"])
        if layer["act"] == "relu":
            x = g.relu(x)
        elif layer["act"] == "softmax":
            x = g.softmax(x, axis=-1)
        return x

    def forward_trunk(self, g, x):
        h = x
        for layer in self.descriptor.trunk:
            h = self._apply_conv(g, h, layer)
        return h

    def forward_heads(self, g, trunk_out):
        m = trunk_out
        for layer in self.descriptor.heads["mask"]:
            m = self._apply_conv(g, m, layer)
        mask_prob = g.resize_nearest(m, self.descriptor.input_hw)
        flat = g.flatten(trunk_out)
        dense_out = {}
        for head in ("joints", "base", "type"):
            h = flat
            for layer in self.descriptor.heads[head]:
                h = self._apply_dense(g, h, layer)
            dense_out[head] = h
        b = trunk_out.shape[0]
        joints = g.reshape(dense_out["joints"], (b, self.descriptor.max_joints, 3))
        return NetworkOutputs(mask_prob=mask_prob, joints=joints,
                              base=dense_out["base"], type_dist=dense_out["type"])

    def forward(self, x, graph=None):
        """x: [B,3,H,W] float array or Tensor. Returns (outputs, graph)."""
        g = graph or Graph()
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        if t.shape[1:] != (3, *self.descriptor.input_hw):
            raise DescriptorError(
                f"input shape {t.shape[1:]} != (3, {self.descriptor.input_hw[0]}, "
                f"{self.descriptor.input_hw[1]})")
        trunk_out = self.forward_trunk(g, t)
        return self.forward_heads(g, trunk_out), g

    def predict(self, x):
        """Forward pass returning plain arrays."""
        outs, _ = self.forward(x)
        return {"mask_prob": outs.mask_prob.values, "joints": outs.joints.values,
                "base": outs.base.values, "type_dist": outs.type_dist.values}

    def joint_count_for_class(self, class_index):
        return get_model(self.classes[class_index]).joint_count


def grow_type_head(net, new_classes, seed):
    """Extend the type head to new classes, keeping old rows.

    Existing class columns are copied verbatim; new columns get fresh
    He-style weights and zero bias.
    """
    old = net.classes
    if old != new_classes[:len(old)]:
        raise ValueError("existing classes must stay a prefix of the new class list")
    desc = ArchitectureDescriptor.from_dict(copy.deepcopy(net.descriptor.as_dict()))
    desc.heads["type"][-1]["fout"] = len(new_classes)
    grown = Network.build(desc, new_classes, seed)
    for name, p in net.params.items():
        if name == "type_out.w":
            grown.params[name].values[:, :len(old)] = p.values
        elif name == "type_out.b":
            grown.params[name].values[:len(old)] = p.values
        else:
            grown.params[name].values[...] = p.values
    return grown


def select_joint_outputs(joints, class_name_or_count):
    """First N_j of the fixed joint slots; trailing slots are padding for
    6-DoF classes and never enter losses or metrics."""
    n = (class_name_or_count if isinstance(class_name_or_count, int)
         else get_model(class_name_or_count).joint_count)
    return np.asarray(joints)[..., :n, :]


# -- input preprocessing ------------------------------------------------------

def _resize_bilinear(img, oh, ow):
    h, w = img.shape[:2]
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    top = img[y0c][:, x0c] * (1 - wx) + img[y0c][:, x1c] * wx
    bot = img[y1c][:, x0c] * (1 - wx) + img[y1c][:, x1c] * wx
    return top * (1 - wy) + bot * wy


def _scaled_size(h, w, out_hw):
    th, tw = out_hw
    s = max(th / h, tw / w)
    return max(int(round(h * s)), th), max(int(round(w * s)), tw), s


def preprocess(image, out_hw=DESK_INPUT_HW):
    """Bilinear downscale + center crop + [0,1] normalization.

    image: uint8 [H,W,3]; returns float32 [3,out_h,out_w].
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"preprocess: expected [H,W,3] image, got {img.shape}")
    h, w = img.shape[:2]
    sh, sw, _ = _scaled_size(h, w, out_hw)
    scaled = _resize_bilinear(img.astype(np.float64), sh, sw)
    oy, ox = (sh - out_hw[0]) // 2, (sw - out_hw[1]) // 2
    crop = scaled[oy:oy + out_hw[0], ox:ox + out_hw[1]]
    return (crop.transpose(2, 0, 1) / 255.0).astype(np.float32)


def preprocess_mask(mask, out_hw=DESK_INPUT_HW):
    """Nearest-neighbor downscale + center crop matching preprocess();
    keeps the mask strictly binary. Returns float32 [out_h,out_w]."""
    m = np.asarray(mask)
    h, w = m.shape[:2]
    sh, sw, _ = _scaled_size(h, w, out_hw)
    ys = np.minimum(((np.arange(sh) + 0.5) * h / sh).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(sw) + 0.5) * w / sw).astype(np.int64), w - 1)
    scaled = m[ys][:, xs]
    oy, ox = (sh - out_hw[0]) // 2, (sw - out_hw[1]) // 2
    crop = scaled[oy:oy + out_hw[0], ox:ox + out_hw[1]]
    return (crop > 0).astype(np.float32)
