from . import (config, data_io, dataset, defenses, diffusion, errors, extraction, image,
               inpainting_attack, membership, metrics, pipeline, util)
