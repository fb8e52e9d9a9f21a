"""Why the inset needs flow correction after a viewpoint change.

Turning the camera moves the rendered face inside the crop, so pasting it at
the original crop location leaves a visible seam.  The dominant displacement
of the optical flow between the source crop and the new render measures that
shift.

    python demos/03_flow_correction.py
"""

import numpy as np
import torch

from viewedit import flow
from viewedit.composite import CompositeConfig, boundary_regions
from viewedit.providers import parse_face
from viewedit.toygen import GeneratorConfig, ToyGenerator, to_numpy_image


def main():
    gen = ToyGenerator(GeneratorConfig())
    w = gen.sample_latents(1, seed=2)[0]
    with torch.no_grad():
        source = to_numpy_image(gen.generate(w, gen.camera(0.0))[1])
    params = flow.FlowParams()
    print(" yaw   d_dom (px)       direction  magnitude")
    for yaw in (0.0, 0.15, 0.3, 0.45):
        with torch.no_grad():
            render = to_numpy_image(gen.generate(w, gen.camera(yaw))[1])
        f = flow.farneback_flow(flow.grayscale(source), flow.grayscale(render), params)
        mask = boundary_regions(parse_face(source), parse_face(render), CompositeConfig()).inside
        est = flow.dominant_displacement(f, mask, eps=0.5, bins=36)
        if est.valid:
            print(f"{yaw:5.2f}  {np.array2string(est.d_dom, precision=2):16s} {est.direction:8.3f}  {est.magnitude:8.3f}")
        else:
            print(f"{yaw:5.2f}  no motion above threshold")


if __name__ == "__main__":
    main()
