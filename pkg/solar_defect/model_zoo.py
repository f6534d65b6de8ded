import logging
from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn as nn

from .cbam import CBAM
from .errors import BackboneUnavailableError

logger = logging.getLogger(__name__)


class TinyBackbone(nn.Module):
    """
    Three conv blocks (16, 32, 32 channels), each halving the spatial dims.
    The last block has no rectifier so that the map handed to the attention keeps its sign.
    """

    def __init__(self, base_width=16, out_channels=32):
        super(TinyBackbone, self).__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, base_width, 3, padding=1),
            nn.BatchNorm2d(base_width),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(base_width, 2 * base_width, 3, padding=1),
            nn.BatchNorm2d(2 * base_width),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * base_width, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.MaxPool2d(2),
        )
        self.out_channels = out_channels

    def forward(self, x):
        return self.features(x)


class CustomCNNBackbone(nn.Module):
    """
    Four blocks of conv -> batch norm -> leaky relu -> 2x max pool, widths doubling from base_width
    """

    def __init__(self, base_width=32, negative_slope=0.01):
        super(CustomCNNBackbone, self).__init__()
        blocks = []
        in_channels = 3
        for i in range(4):
            width = base_width * 2 ** i
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_channels, width, 3, padding=1),
                    nn.BatchNorm2d(width),
                    nn.LeakyReLU(negative_slope),
                    nn.MaxPool2d(2),
                )
            )
            in_channels = width
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = in_channels

    def forward(self, x):
        return self.blocks(x)


class BackboneBuilder:
    """
    Builders of feature extractors mapping N x 3 x H x W images to N x C x h x w feature maps.
    Heavy backbones come from torchvision and are only wrapped here.
    """

    @staticmethod
    def tiny(pretrained):
        BackboneBuilder._refuse_pretrained("tiny", pretrained)
        return TinyBackbone()

    @staticmethod
    def custom_cnn(pretrained):
        BackboneBuilder._refuse_pretrained("custom_cnn", pretrained)
        return CustomCNNBackbone()

    @staticmethod
    def efficientnet_b0(pretrained):
        return BackboneBuilder._torchvision("efficientnet_b0", pretrained).features

    @staticmethod
    def mobilenet_v3(pretrained):
        return BackboneBuilder._torchvision("mobilenet_v3_large", pretrained).features

    @staticmethod
    def vgg19(pretrained):
        return BackboneBuilder._torchvision("vgg19", pretrained).features

    @staticmethod
    def resnet50(pretrained):
        model = BackboneBuilder._torchvision("resnet50", pretrained)
        return nn.Sequential(*list(model.children())[:-2])

    @staticmethod
    def densenet121(pretrained):
        # torchvision applies the final relu in the classifier forward, not in features
        return nn.Sequential(BackboneBuilder._torchvision("densenet121", pretrained).features, nn.ReLU())

    @staticmethod
    def _refuse_pretrained(name, pretrained):
        if pretrained:
            raise BackboneUnavailableError(
                f"No pretrained weights exist for the '{name}' backbone, use pretrained=false", backbone=name
            )

    @staticmethod
    def _torchvision(name, pretrained):
        try:
            from torchvision import models
        except ImportError as e:
            raise BackboneUnavailableError(f"torchvision is required for the '{name}' backbone ({e})", backbone=name)
        try:
            return getattr(models, name)(weights="DEFAULT" if pretrained else None)
        except Exception as e:
            if pretrained:
                raise BackboneUnavailableError(
                    f"Pretrained weights of '{name}' could not be loaded ({e}), "
                    f"set model.backbone.pretrained=false to train from scratch",
                    backbone=name,
                )
            raise BackboneUnavailableError(f"Backbone '{name}' could not be built ({e})", backbone=name)


class Backbone(Enum):
    """
    Registered backbones: (builder, output channels, display name)
    """

    TINY = (BackboneBuilder.tiny, 32, "TinyBackbone")
    CUSTOM_CNN = (BackboneBuilder.custom_cnn, 256, "CustomCNN")
    EFFICIENTNET_B0 = (BackboneBuilder.efficientnet_b0, 1280, "EfficientNet-B0")
    MOBILENET_V3 = (BackboneBuilder.mobilenet_v3, 960, "MobileNetV3")
    VGG19 = (BackboneBuilder.vgg19, 512, "VGG19")
    RESNET50 = (BackboneBuilder.resnet50, 2048, "ResNet50")
    DENSENET121 = (BackboneBuilder.densenet121, 1024, "DenseNet121")


@dataclass(frozen=True)
class BackboneSpec:
    name: Backbone = Backbone.TINY
    pretrained: bool = False

    @property
    def output_channels(self):
        return self.name.value[1]

    @property
    def display_name(self):
        return self.name.value[2]

    def build(self):
        module = self.name.value[0](self.pretrained)
        was_training = module.training
        module.eval()
        with torch.no_grad():
            channels = module(torch.zeros(1, 3, 64, 64)).shape[1]
        module.train(was_training)
        if channels != self.output_channels:
            raise RuntimeError(
                f"Backbone {self.name.name} produced {channels} channels, {self.output_channels} were declared"
            )
        return module


@dataclass(frozen=True)
class ModelSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    use_cbam: bool = True
    dropout_p: float = 0.4
    num_classes: int = 6
    reduction_ratio: int = 16
    spatial_kernel: int = 7
    freeze_backbone: bool = False

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise RuntimeError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.num_classes < 2:
            raise RuntimeError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.reduction_ratio < 1:
            raise RuntimeError(f"reduction_ratio must be at least 1, got {self.reduction_ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise RuntimeError(f"spatial_kernel must be a positive odd integer, got {self.spatial_kernel}")

    @property
    def display_name(self):
        name = self.backbone.display_name
        return f"{name} + CBAM" if self.use_cbam else name


class ClassifierModel(nn.Module):
    """
    backbone -> (attention) -> global average pool -> dropout -> linear head
    """

    def __init__(self, spec, backbone):
        super(ClassifierModel, self).__init__()
        self.spec = spec
        channels = spec.backbone.output_channels
        self.backbone = backbone
        self.cbam = CBAM(channels, spec.reduction_ratio, spec.spatial_kernel) if spec.use_cbam else nn.Identity()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(spec.dropout_p)
        self.head = nn.Linear(channels, spec.num_classes)

    def features(self, x):
        return self.cbam(self.backbone(x))

    def forward(self, x):
        pooled = torch.flatten(self.pool(self.features(x)), 1)
        return self.head(self.dropout(pooled))


def build_model(spec):
    model = ClassifierModel(spec, spec.backbone.build())
    if spec.freeze_backbone:
        for param in model.backbone.parameters():
            param.requires_grad = False
    logger.debug("Built %s with %d trainable parameters", spec.display_name, count_parameters(model))
    return model


def build_custom_cnn(num_classes):
    spec = ModelSpec(BackboneSpec(Backbone.CUSTOM_CNN), use_cbam=False, dropout_p=0.0, num_classes=num_classes)
    return build_model(spec)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def serialized_size_bytes(model, metadata=None):
    from .checkpoint import ModelCheckpoint

    return len(ModelCheckpoint.from_model(model, metadata).to_bytes())
