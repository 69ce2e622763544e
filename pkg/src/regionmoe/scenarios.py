"""Named synthetic cohorts used by the acceptance suite and the scripts."""

from __future__ import annotations

from .synth import PlantedBlock, SynthSpec, default_spec


def complementary_spec(n: int = 1200, missing: float = 0.1) -> SynthSpec:
    """Signal in 4 of 29 blocks, split across MRI and PET.

    MRI separates CN from the impaired classes; PET separates AD from the
    rest, with a smaller effect, so MRI is the dominant modality and the
    two are complementary (neither alone resolves MCI).
    """
    spec = default_spec(n_subjects=n)
    for m in spec.modalities[:2]:
        m.missing_rate = missing
    spec.planted = [
        PlantedBlock("MRI", "Temporal", 1.6, [-1.0, 0.5, 0.5]),
        PlantedBlock("MRI", "Subcortical Temporal", 1.6, [-1.0, 0.5, 0.5]),
        PlantedBlock("PET", "Brainstem", 1.2, [-0.5, -0.5, 1.0]),
        PlantedBlock("PET", "Striatum/Basal Ganglia", 1.2, [-0.5, -0.5, 1.0]),
    ]
    return spec


def null_spec(n: int = 1200, missing: float = 0.1) -> SynthSpec:
    spec = default_spec(n_subjects=n, effect_size=0.0)
    for m in spec.modalities[:2]:
        m.missing_rate = missing
    return spec
