"""Export precomputed tensors from live encoders into the interchange format.

Needs the optional ``real`` extra (torch, transformers, Pillow) plus, for the
diffusion attention, ``diffusers``. Model errors are surfaced verbatim; the
caller decides whether missing weights are fatal. The synthetic generator, not
this module, is what the test suites rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camforge import write_tensor


@dataclass
class ExportJob:
    output_dir: Path
    clip_model: str = "openai/clip-vit-base-patch16"
    sd_model: str = "stabilityai/stable-diffusion-2-1"
    grid: int = 14
    layers: int = 3
    class_names: list = field(default_factory=list)
    prompt_template: str = (
        "a realistic photograph of a fully visible, entire {category} with natural "
        "colors, centered in the image, with a clear and distinct background, high "
        "color contrast, and the {category} not occupying the entire frame, ensuring "
        "it is completely visible without cropping."
    )
    device: str = "cpu"


def _load_clip(job):
    import torch
    from transformers import CLIPModel, CLIPProcessor

    model = CLIPModel.from_pretrained(job.clip_model).to(job.device).eval()
    processor = CLIPProcessor.from_pretrained(job.clip_model)
    return torch, model, processor


def _resize_attention(attn, grid):
    """Average-pool a (T, T) attention onto (grid*grid, grid*grid)."""
    t = attn.shape[0]
    side = int(round(t**0.5))
    if side * side != t:
        raise ValueError(f"cannot reshape {t} patch tokens to a square grid")
    if side == grid:
        return attn
    a = attn.reshape(side, side, side, side)
    factor = side // grid
    if factor * grid != side:
        raise ValueError(f"token grid {side} does not pool onto requested grid {grid}")
    return (
        a.reshape(grid, factor, grid, factor, grid, factor, grid, factor)
        .mean(axis=(1, 3, 5, 7))
        .reshape(grid * grid, grid * grid)
    )


def export_real(images, job: ExportJob, sd_attention_fn=None) -> Path:
    """Run frozen encoders over ``images`` and emit a validating manifest.

    ``images`` is a list of (sample_id, image_path, labels). When
    ``sd_attention_fn`` is given it must map an image path to an
    (H*W, H*W) array; otherwise the diffusion pipeline is loaded, which
    requires ``diffusers``.
    """
    torch, model, processor = _load_clip(job)
    from PIL import Image

    out = Path(job.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = job.grid

    with torch.no_grad():
        text_inputs = processor(
            text=[f"a photo of a {name}" for name in job.class_names],
            return_tensors="pt",
            padding=True,
        ).to(job.device)
        text_embeds = model.get_text_features(**text_inputs)
        text_embeds = text_embeds / text_embeds.norm(dim=-1, keepdim=True)
    write_tensor(text_embeds.T.cpu().numpy().astype(np.float32), out / "text.cft")

    samples = []
    for sample_id, image_path, labels in images:
        image = Image.open(image_path).convert("RGB")
        inputs = processor(images=image, return_tensors="pt").to(job.device)
        with torch.no_grad():
            vision = model.vision_model(**inputs, output_attentions=True, output_hidden_states=True)
        # heads averaged, CLS row/column dropped, pooled onto the export grid
        attn_paths, value_paths = [], []
        num_layers = len(vision.attentions)
        for rank, layer in enumerate(range(num_layers - job.layers, num_layers)):
            attn = vision.attentions[layer][0].mean(dim=0)[1:, 1:].cpu().numpy().astype(np.float64)
            attn = _resize_attention(attn, grid)
            write_tensor(attn.astype(np.float32), out / f"{sample_id}_attn{rank}.cft")
            hidden = vision.hidden_states[layer][0, 1:, :]
            projected = model.visual_projection(model.vision_model.post_layernorm(hidden))
            values = projected.detach().cpu().numpy().astype(np.float64)
            side = int(round(values.shape[0] ** 0.5))
            values = values.reshape(side, side, -1)
            factor = side // grid
            values = values.reshape(grid, factor, grid, factor, -1).mean(axis=(1, 3))
            write_tensor(values.reshape(grid * grid, -1).astype(np.float32), out / f"{sample_id}_val{rank}.cft")
            attn_paths.append(f"{sample_id}_attn{rank}.cft")
            value_paths.append(f"{sample_id}_val{rank}.cft")
            if rank == job.layers - 1:
                feats = values.reshape(grid, grid, -1)
                write_tensor(feats.astype(np.float32), out / f"{sample_id}_feat.cft")

        if sd_attention_fn is not None:
            sd = np.asarray(sd_attention_fn(image_path), dtype=np.float64)
        else:
            sd = _diffusion_attention(image_path, job, grid)
        if sd.shape != (grid * grid, grid * grid):
            raise ValueError(f"diffusion attention shape {sd.shape} does not match grid {grid}")
        write_tensor(sd.astype(np.float32), out / f"{sample_id}_sd.cft")

        samples.append(
            {
                "id": sample_id,
                "feature_path": f"{sample_id}_feat.cft",
                "clip_attn_paths": attn_paths,
                "clip_value_paths": value_paths,
                "sd_attn_path": f"{sample_id}_sd.cft",
                "image_labels": sorted(labels),
            }
        )

    doc = {
        "version": 1,
        "num_classes": len(job.class_names),
        "feature_dim": int(text_embeds.shape[1]),
        "class_names": list(job.class_names),
        "text_embed_path": "text.cft",
        "samples": samples,
        "cache_samples": [],
    }
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest


def _diffusion_attention(image_path, job: ExportJob, grid):
    """Self-attention from the denoising UNet, heads and layers averaged."""
    import torch
    from diffusers import StableDiffusionPipeline
    from PIL import Image

    pipe = StableDiffusionPipeline.from_pretrained(job.sd_model).to(job.device)
    pipe.unet.eval()
    captured = []

    def hook(module, args, kwargs, output):
        hidden = args[0] if args else kwargs.get("hidden_states")
        if hidden is None or hidden.shape[1] != grid * grid:
            return
        q = module.to_q(hidden)
        k = module.to_k(hidden)
        heads = module.heads
        b, t, _ = q.shape
        q = q.reshape(b, t, heads, -1).transpose(1, 2)
        k = k.reshape(b, t, heads, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5, dim=-1)
        captured.append(attn.mean(dim=1)[0].detach().cpu().numpy())

    handles = []
    for name, module in pipe.unet.named_modules():
        if name.endswith("attn1") and "up_blocks" in name:
            handles.append(module.register_forward_hook(hook, with_kwargs=True))
    try:
        image = Image.open(image_path).convert("RGB").resize((384, 384))
        array = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
        latents = pipe.vae.encode(
            torch.from_numpy(array).permute(2, 0, 1)[None].to(job.device)
        ).latent_dist.mean
        latents = latents * pipe.vae.config.scaling_factor
        timestep = torch.tensor([100], device=job.device)
        noise = torch.randn_like(latents)
        noisy = pipe.scheduler.add_noise(latents, noise, timestep)
        embeddings = pipe.text_encoder(
            pipe.tokenizer([""], return_tensors="pt").input_ids.to(job.device)
        )[0]
        with torch.no_grad():
            pipe.unet(noisy, timestep, encoder_hidden_states=embeddings)
    finally:
        for handle in handles:
            handle.remove()
    if not captured:
        raise RuntimeError(f"no UNet self-attention matched the {grid}x{grid} grid")
    return np.mean(captured, axis=0)
