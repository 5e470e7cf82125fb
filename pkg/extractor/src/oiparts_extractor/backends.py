"""Model backends that turn an RGB image into raw feature grids.

The heavyweight stack (torch, transformers, diffusers) is imported lazily so
the package installs and tests cleanly on machines without checkpoints; any
object exposing the same four members can stand in for it.
"""

from __future__ import annotations

import numpy as np

DINO_MODEL = "facebook/dinov2-large"
SD_MODEL = "runwayml/stable-diffusion-v1-5"
DINO_LAYER = 11
SD_UNET_TAP = "up_blocks.1"
SD_NOISE_SEED = 0


class WeightsUnavailable(RuntimeError):
    """Raised when a checkpoint cannot be loaded from the local cache."""


def _download_help(model_id: str) -> str:
    return (
        f"could not load {model_id!r} from the local cache. Download it once "
        f"with network access, e.g. `huggingface-cli download {model_id}` or "
        f"`python -c \"from huggingface_hub import snapshot_download; "
        f"snapshot_download('{model_id}')\"`, then re-run."
    )


class TorchBackend:
    """DINOv2 token features and SD denoising U-Net activations.

    DINOv2 features are the token grid from transformer block `DINO_LAYER`
    (hidden size 1024 for the large model).  SD features are the activations
    of the U-Net decoder block `SD_UNET_TAP` while denoising the VAE-encoded
    image at the requested timestep, conditioned on the text prompt; the
    added noise is seeded so repeated runs agree.
    """

    dino_input_size = 518
    sd_input_size = 512

    def __init__(self, device: str = "cpu", local_files_only: bool = True):
        try:
            import torch
            from transformers import AutoImageProcessor, Dinov2Model
        except ImportError as e:
            raise WeightsUnavailable(
                f"torch/transformers are not installed ({e}); "
                "install the package with the [models] extra"
            ) from e
        self._torch = torch
        self.device = device
        try:
            self._dino_processor = AutoImageProcessor.from_pretrained(
                DINO_MODEL, local_files_only=local_files_only
            )
            self._dino = Dinov2Model.from_pretrained(
                DINO_MODEL, local_files_only=local_files_only
            ).to(device).eval()
        except Exception as e:
            raise WeightsUnavailable(_download_help(DINO_MODEL)) from e
        try:
            from diffusers import StableDiffusionPipeline

            self._sd = StableDiffusionPipeline.from_pretrained(
                SD_MODEL, local_files_only=local_files_only, safety_checker=None
            ).to(device)
            self._sd.unet.eval()
        except Exception as e:
            raise WeightsUnavailable(_download_help(SD_MODEL)) from e

    def describe(self) -> dict:
        return {
            "dino": {"model": DINO_MODEL, "layer": DINO_LAYER, "input": self.dino_input_size},
            "sd": {
                "model": SD_MODEL,
                "unet_tap": SD_UNET_TAP,
                "input": self.sd_input_size,
                "noise_seed": SD_NOISE_SEED,
            },
        }

    def dino_features(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        inputs = self._dino_processor(
            images=image, return_tensors="pt", do_resize=False, do_center_crop=False
        ).to(self.device)
        with torch.no_grad():
            hidden = self._dino(**inputs, output_hidden_states=True).hidden_states
        tokens = hidden[DINO_LAYER][0, 1:]  # drop the class token
        side = int(round(tokens.shape[0] ** 0.5))
        grid = tokens.reshape(side, side, -1)
        return grid.float().cpu().numpy()

    def sd_features(self, image: np.ndarray, prompt: str, timestep: int) -> np.ndarray:
        torch = self._torch
        pipe = self._sd
        captured = {}

        def hook(_module, _inputs, output):
            captured["features"] = output

        block = pipe.unet.up_blocks[int(SD_UNET_TAP.split(".")[1])]
        handle = block.register_forward_hook(hook)
        try:
            with torch.no_grad():
                pixels = torch.from_numpy(
                    image.astype(np.float32) / 127.5 - 1.0
                ).permute(2, 0, 1)[None].to(self.device)
                latents = pipe.vae.encode(pixels).latent_dist.mean
                latents = latents * pipe.vae.config.scaling_factor
                generator = torch.Generator(self.device).manual_seed(SD_NOISE_SEED)
                noise = torch.randn(
                    latents.shape, generator=generator, device=self.device
                )
                t = torch.tensor([timestep], device=self.device)
                noisy = pipe.scheduler.add_noise(latents, noise, t)
                text = pipe.tokenizer(
                    prompt, padding="max_length",
                    max_length=pipe.tokenizer.model_max_length, return_tensors="pt",
                ).to(self.device)
                embeddings = pipe.text_encoder(text.input_ids)[0]
                pipe.unet(noisy, t, encoder_hidden_states=embeddings)
        finally:
            handle.remove()
        grid = captured["features"][0].permute(1, 2, 0)  # (h, w, c)
        return grid.float().cpu().numpy()


def default_backend() -> TorchBackend:
    return TorchBackend()
