"""Writers for small NTU ``.skeleton`` documents."""
import numpy as np


def body_block(body_id, joints):
    lines = [f"{body_id} 0 1 1 1 1 0 0.01 0.02 2", "25"]
    for x, y, z in joints:
        # trailing fields: depth/color pixel coords, orientation, tracking state
        lines.append(f"{float(x)!r} {float(y)!r} {float(z)!r} 250.1 200.2 960.3 540.4 0.1 0.2 0.3 0.9 2")
    return lines


def ntu_text(frames):
    """``frames`` is a list of frames, each a list of ``(body_id, 25x3 array)``."""
    lines = [str(len(frames))]
    for bodies in frames:
        lines.append(str(len(bodies)))
        for body_id, joints in bodies:
            lines += body_block(body_id, np.asarray(joints))
    return "\n".join(lines) + "\n"
