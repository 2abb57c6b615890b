"""
Protocol definitions for the LEGCNet pruning pipeline

Binary file formats (parameters, masks, trajectories, IDX) and the default
constants every component falls back to.
"""
import struct

import numpy as np

from common.errors import FormatError

# ============================================================================
# Parameter / Mask File Format
# ============================================================================
# Header: [magic (4 bytes)][version (2 bytes)][n_layers (2 bytes)]
#         [rows (4 bytes)][cols (4 bytes)] * n_layers
# Params body: per layer, weights row-major float64, then biases float64
# Mask body:   per layer, keep row-major uint8
# All fields little-endian.

PARAMS_MAGIC = b"LGCP"
MASK_MAGIC = b"LGCM"
FORMAT_VERSION = 1

_LAYERS_HEADER = '<4sHH'
_LAYERS_HEADER_SIZE = struct.calcsize(_LAYERS_HEADER)  # 8
_SHAPE = '<II'
_SHAPE_SIZE = struct.calcsize(_SHAPE)  # 8


def _pack_layer_header(magic, shapes):
    header = struct.pack(_LAYERS_HEADER, magic, FORMAT_VERSION, len(shapes))
    for rows, cols in shapes:
        header += struct.pack(_SHAPE, rows, cols)
    return header


def _unpack_layer_header(data, magic):
    if len(data) < _LAYERS_HEADER_SIZE:
        raise FormatError(f"Invalid header size: {len(data)}")
    found, version, n_layers = struct.unpack(_LAYERS_HEADER, data[:_LAYERS_HEADER_SIZE])
    if found != magic:
        raise FormatError(f"Bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {version}")

    offset = _LAYERS_HEADER_SIZE
    if len(data) < offset + n_layers * _SHAPE_SIZE:
        raise FormatError("Truncated layer shape table")
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack(_SHAPE, data[offset:offset + _SHAPE_SIZE]))
        offset += _SHAPE_SIZE
    return shapes, offset


def _take(data, offset, count, dtype):
    nbytes = count * np.dtype(dtype).itemsize
    if len(data) < offset + nbytes:
        raise FormatError(f"Truncated body: need {offset + nbytes} bytes, have {len(data)}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy(), offset + nbytes


def pack_params(weights, biases):
    """Pack per-layer weight matrices and bias vectors into bytes"""
    shapes = [w.shape for w in weights]
    body = b''
    for w, b in zip(weights, biases):
        body += np.ascontiguousarray(w, dtype='<f8').tobytes()
        body += np.ascontiguousarray(b, dtype='<f8').tobytes()
    return _pack_layer_header(PARAMS_MAGIC, shapes) + body


def unpack_params(data):
    """Unpack bytes into (weights, biases) lists of float64 arrays"""
    shapes, offset = _unpack_layer_header(data, PARAMS_MAGIC)
    weights, biases = [], []
    for rows, cols in shapes:
        flat, offset = _take(data, offset, rows * cols, '<f8')
        weights.append(flat.reshape(rows, cols).astype(np.float64))
        bias, offset = _take(data, offset, rows, '<f8')
        biases.append(bias.astype(np.float64))
    return weights, biases


def pack_mask(keep):
    """Pack binary keep matrices into bytes"""
    shapes = [k.shape for k in keep]
    body = b''.join(np.ascontiguousarray(k, dtype=np.uint8).tobytes() for k in keep)
    return _pack_layer_header(MASK_MAGIC, shapes) + body


def unpack_mask(data):
    """Unpack bytes into a list of uint8 keep matrices"""
    shapes, offset = _unpack_layer_header(data, MASK_MAGIC)
    keep = []
    for rows, cols in shapes:
        flat, offset = _take(data, offset, rows * cols, np.uint8)
        keep.append(flat.reshape(rows, cols))
    return keep

# ============================================================================
# Trajectory File Format
# ============================================================================
# Header: [magic "LGCT" (4 bytes)][version (2 bytes)][n_connections (4 bytes)]
#         [n_iterations (4 bytes)][run_id_len (2 bytes)][run_id (utf-8)]
# Index:  [layer (4 bytes)][to (4 bytes)][from (4 bytes)] * n_connections
# Iterations: [iteration (8 bytes)] * n_iterations
# Body: column-major float64, one contiguous column per connection
# All fields little-endian.

TRAJECTORY_MAGIC = b"LGCT"

_TRAJ_HEADER = '<4sHIIH'
_TRAJ_HEADER_SIZE = struct.calcsize(_TRAJ_HEADER)  # 16
_CONNECTION = '<III'
_CONNECTION_SIZE = struct.calcsize(_CONNECTION)  # 12


def pack_trajectory(run_id, connections, iterations, values):
    """
    Pack a trajectory store
    connections: sequence of (layer, to, from)
    values: array of shape (n_iterations, n_connections)
    """
    values = np.asarray(values, dtype=np.float64)
    n_iterations, n_connections = values.shape
    if n_connections != len(connections) or n_iterations != len(iterations):
        raise FormatError("Trajectory values do not match index or iteration table")

    run_bytes = run_id.encode('utf-8')
    header = struct.pack(_TRAJ_HEADER, TRAJECTORY_MAGIC, FORMAT_VERSION,
                         n_connections, n_iterations, len(run_bytes))
    index = b''.join(struct.pack(_CONNECTION, *conn) for conn in connections)
    iters = np.asarray(iterations, dtype='<u8').tobytes()
    body = np.asfortranarray(values).astype('<f8').tobytes(order='F')
    return header + run_bytes + index + iters + body


def unpack_trajectory(data):
    """Unpack bytes into (run_id, connections, iterations, values)"""
    if len(data) < _TRAJ_HEADER_SIZE:
        raise FormatError(f"Invalid trajectory header size: {len(data)}")
    magic, version, n_connections, n_iterations, run_len = struct.unpack(
        _TRAJ_HEADER, data[:_TRAJ_HEADER_SIZE])
    if magic != TRAJECTORY_MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {TRAJECTORY_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported trajectory version {version}")

    offset = _TRAJ_HEADER_SIZE
    if len(data) < offset + run_len + n_connections * _CONNECTION_SIZE:
        raise FormatError("Truncated trajectory index")
    run_id = data[offset:offset + run_len].decode('utf-8')
    offset += run_len

    connections = []
    for _ in range(n_connections):
        connections.append(struct.unpack(_CONNECTION, data[offset:offset + _CONNECTION_SIZE]))
        offset += _CONNECTION_SIZE

    iterations, offset = _take(data, offset, n_iterations, '<u8')
    flat, offset = _take(data, offset, n_iterations * n_connections, '<f8')
    values = flat.reshape((n_iterations, n_connections), order='F').astype(np.float64)
    return run_id, connections, iterations.astype(np.int64), values

# ============================================================================
# IDX Format (MNIST)
# ============================================================================
# Images: [magic 0x00000803][count][rows][cols] then unsigned bytes
# Labels: [magic 0x00000801][count] then unsigned bytes
# Big-endian 32-bit header fields.

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_PIXEL_MAX = 255.0


def unpack_idx_images_header(data):
    """Returns (count, rows, cols)"""
    if len(data) < 16:
        raise FormatError(f"Invalid IDX image header size: {len(data)}")
    magic, count, rows, cols = struct.unpack('>IIII', data[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"Bad IDX image magic 0x{magic:08x}")
    return count, rows, cols


def unpack_idx_labels_header(data):
    """Returns count"""
    if len(data) < 8:
        raise FormatError(f"Invalid IDX label header size: {len(data)}")
    magic, count = struct.unpack('>II', data[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"Bad IDX label magic 0x{magic:08x}")
    return count


def pack_idx_images(images):
    """Pack a (count, rows, cols) uint8 array as an IDX image file"""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    return struct.pack('>IIII', IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes()


def pack_idx_labels(labels):
    """Pack a uint8 label vector as an IDX label file"""
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack('>II', IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()

# ============================================================================
# Training Defaults
# ============================================================================
DEFAULT_LEARNING_RATE = 0.1
DEFAULT_BATCH_SIZE = 16
DEFAULT_MAX_EPOCHS = 500
DEFAULT_CONVERGENCE_TOL = 1e-4
DEFAULT_PATIENCE = 5  # epochs
DEFAULT_INIT_K = 1.0  # uniform init bound constant
DEFAULT_INIT_SIGMA = 0.5  # gaussian init std
DEFAULT_PERTURBATION = 1e-6

# ============================================================================
# Trajectory / Chaos Defaults
# ============================================================================
DEFAULT_WINDOW_LEN = 200  # iterates
MIN_WINDOW_LEN = 50
DEFAULT_EMBED_DIM = 3
DEFAULT_EMBED_DELAY = 1
DEFAULT_THEILER_WINDOW = 10
DEFAULT_FIT_RANGE = (1, 8)
DEFAULT_MIN_NEIGHBORS = 5

# ============================================================================
# Granger Defaults
# ============================================================================
DEFAULT_MAX_LAG = 4
DEFAULT_ALPHA = 0.05
DEFAULT_MIN_SERIES_LEN = 5

# ============================================================================
# Pruning / Diagnostics Defaults
# ============================================================================
PT_PROBE_FRACTION = 0.10  # of dense convergence epochs
DEFAULT_SHAP_BACKGROUND = 50
DEFAULT_SHAP_EXPLAIN = 20  # test samples explained per model
SHAP_EXACT_MAX_FEATURES = 10
DEFAULT_TOP_K = 3
ALPHA_BAND = (2.0, 6.0)  # well-trained power-law exponent band
MIN_ESD_EIGENVALUES = 10
MIN_TAIL_POINTS = 5
CORRELATION_TRAP_FACTOR = 2.0
