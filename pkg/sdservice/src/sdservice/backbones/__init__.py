from sdservice.backbones.base import Backbone, BackboneError, PredictOutput


def make_backbone(name: str, device: str = "cpu") -> Backbone:
    if name == "tiny":
        from sdservice.backbones.tiny import TinyBackbone

        return TinyBackbone(device=device)
    if name == "pretrained":
        from sdservice.backbones.pretrained import PretrainedBackbone

        return PretrainedBackbone(device=device)
    raise BackboneError(f"unknown backbone {name!r}; use 'tiny' or 'pretrained'")


__all__ = ["Backbone", "BackboneError", "PredictOutput", "make_backbone"]
