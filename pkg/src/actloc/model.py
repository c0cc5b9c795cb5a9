"""The full detector: trunk -> keyframe slice -> RPN, RoIPool -> head -> classifier."""
import numpy as np

from actloc import backbone, detection
from actloc.nn import FrozenBatchNorm, Module, Sequential


class ActionDetector(Module):
    def __init__(self, backbone_cfg, detection_cfg, class_agnostic=True, context=False,
                 seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.backbone_cfg = backbone_cfg
        self.detection_cfg = detection_cfg
        self.class_agnostic = class_agnostic
        self.use_context = context
        self.trunk = self.add("trunk", backbone.Trunk(backbone_cfg, rng))
        t, h, w, c = backbone_cfg.feature_shape
        self.rpn = self.add(
            "rpn", detection.RPN(c, detection_cfg.rpn_channels,
                                 detection_cfg.anchors_per_cell, rng)
        )
        self.head = self.add("head", backbone.Head(backbone_cfg, rng))
        d_in = backbone_cfg.embedding_dim
        self.context = None
        if context:
            self.context = self.add("context", backbone.ContextNet(backbone_cfg, rng))
            d_in += backbone_cfg.context_dim
        self.classifier = self.add(
            "classifier",
            detection.BoxClassifier(d_in, detection_cfg.num_classes, class_agnostic, rng),
        )
        self.anchors = detection.generate_anchors(
            (h, w), detection_cfg.anchor_scales, detection_cfg.anchor_aspects
        )

    @property
    def classifier_input_dim(self):
        return self.classifier.cls.params["weight"].shape[0]

    def keyframes(self, clips):
        return clips[:, backbone.center_index(clips.shape[1])]

    def embed(self, volume, clips, boxes, batch_index, train=True):
        """RoI embeddings, with per-sample context appended when enabled."""
        pooled, record = detection.roipool_forward(
            volume, boxes, batch_index, self.detection_cfg.roi_size
        )
        emb = self.head(pooled, train)
        if self.context is not None:
            ctx = self.context(self.keyframes(clips), train)
            emb = np.concatenate([emb, ctx[np.asarray(batch_index, dtype=np.int64)]], axis=1)
        return emb, record

    def embed_backward(self, g, record, batch_index, n):
        """Gradient of the feature volume and routed context gradients."""
        width = self.backbone_cfg.embedding_dim
        if self.context is not None:
            g_ctx = np.zeros((n, g.shape[1] - width))
            np.add.at(g_ctx, np.asarray(batch_index, dtype=np.int64), g[:, width:])
            self.context.backward(g_ctx)
            g = g[:, :width]
        return detection.roipool_backward(self.head.backward(g), record)

    def detect(self, clips):
        """Inference over a batch: per-sample (proposals, objectness, Detections)."""
        clips = np.asarray(clips, dtype=np.float64)
        volume = self.trunk(clips, train=False)
        center = backbone.slice_center_frame(volume)
        logits, deltas = self.rpn(center, train=False)
        results = []
        for i in range(len(clips)):
            props, objectness = detection.propose(
                logits[i], deltas[i], self.anchors, self.detection_cfg
            )
            if len(props) == 0:
                results.append((props, objectness, detection.postprocess(
                    props, np.zeros((0, self.detection_cfg.num_classes)),
                    np.zeros((0, 4)), self.detection_cfg)))
                continue
            emb, _ = self.embed(volume[i : i + 1], clips[i : i + 1], props,
                                np.zeros(len(props), dtype=np.int64), train=False)
            probs, reg = detection.classify_and_regress(self.classifier, emb)
            results.append(
                (props, objectness,
                 detection.postprocess(props, probs, reg, self.detection_cfg))
            )
        return results

    def trainable(self, train_batchnorm=False):
        """Names of parameters the optimizer updates."""
        frozen = set()
        if not train_batchnorm:
            for prefix, module in self.named_modules():
                if isinstance(module, FrozenBatchNorm):
                    frozen.update(prefix + name for name in module.params)
        return [name for name, _ in self.named_parameters() if name not in frozen]


def _calibrate(seq, x):
    for name in seq.order:
        child = seq.children[name]
        if isinstance(child, Sequential):
            x = _calibrate(child, x)
        elif isinstance(child, FrozenBatchNorm):
            axes = tuple(range(x.ndim - 1))
            child.buffers["mean"][...] = x.mean(axis=axes)
            child.buffers["var"][...] = x.var(axis=axes)
            x = child(x, train=False)
        else:
            x = child(x, train=False)
    return x


def calibrate_batchnorm(model, clips, boxes, batch_index):
    """Set frozen batch-norm statistics from one pass over sample data.

    Each layer is calibrated on the output of the already-calibrated layers
    before it. Without pretrained statistics this keeps activations at unit
    scale through the stack.
    """
    clips = np.asarray(clips, dtype=np.float64)
    volume = _calibrate(model.trunk, clips)
    pooled, _ = detection.roipool_forward(volume, boxes, batch_index,
                                          model.detection_cfg.roi_size)
    _calibrate(model.head, pooled)
    if model.context is not None:
        _calibrate(model.context, model.keyframes(clips)[:, None])
