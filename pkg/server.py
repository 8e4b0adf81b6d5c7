"""
HTTP Server
Flask app exposing enhance / detect / pipeline endpoints over PPM uploads.
"""

import base64
import logging
import sys
from typing import List, Optional, Sequence

from flask import Flask, jsonify, request
from flask_cors import CORS

from config import load_config
from detector import Detection
from errors import NumericError, PipelineError, ValidationError
from image_io import decode_ppm, encode_ppm
from pipeline import Pipeline
from visualization import class_label

logger = logging.getLogger(__name__)


def encode_image_to_base64(image) -> str:
    """Encode an image as a PPM data URI"""
    encoded = base64.b64encode(encode_ppm(image)).decode("ascii")
    return f"data:image/x-portable-pixmap;base64,{encoded}"


def detections_to_json(detections: Sequence[Detection], class_names: Sequence[str]) -> List[dict]:
    rows = []
    for det in detections:
        rows.append({
            "class_id": det.class_id,
            "class_name": class_label(det.class_id, class_names),
            "score": det.score,
            "box": [det.box.x_min, det.box.y_min, det.box.x_max, det.box.y_max],
        })
    return rows


def _uploaded_image():
    if "file" not in request.files:
        raise ValidationError("No file uploaded")
    return decode_ppm(request.files["file"].read())


def create_app(config_path: Optional[str] = None, pipeline: Optional[Pipeline] = None) -> Flask:
    """
    Build the Flask app.

    Args:
        config_path: Config naming both checkpoints; loaded once at startup
        pipeline: Already loaded pipeline (takes precedence over config_path)

    Raises:
        ConfigError: a checkpoint is missing, before any request is served
    """
    pipeline = pipeline or Pipeline.from_config(load_config(config_path))
    app = Flask(__name__)
    CORS(app)
    app.config["PIPELINE"] = pipeline

    def failure(exc: Exception, endpoint: str):
        logger.error(f"Error in {endpoint}: {exc}")
        status = 500 if isinstance(exc, NumericError) or not isinstance(exc, PipelineError) else 400
        return jsonify({"success": False, "error": str(exc)}), status

    @app.route("/api/health", methods=["GET"])
    def health():
        return jsonify({
            "success": True,
            "scale_factor": pipeline.scale_factor,
            "class_names": list(pipeline.class_names),
        })

    @app.route("/api/enhance", methods=["POST"])
    def enhance():
        try:
            sr_image = pipeline.enhance(_uploaded_image())
            return jsonify({"success": True, "shape": list(sr_image.shape),
                            "sr_image": encode_image_to_base64(sr_image)})
        except Exception as exc:
            return failure(exc, "/api/enhance")

    @app.route("/api/detect", methods=["POST"])
    def detect():
        try:
            image = _uploaded_image()
            detections = pipeline.detect(image)
            return jsonify({
                "success": True,
                "detections": detections_to_json(detections, pipeline.class_names),
                "annotated_image": encode_image_to_base64(pipeline.annotate(image, detections)),
            })
        except Exception as exc:
            return failure(exc, "/api/detect")

    @app.route("/api/pipeline", methods=["POST"])
    def run():
        try:
            sr_image, detections = pipeline.run(_uploaded_image())
            return jsonify({
                "success": True,
                "detections": detections_to_json(detections, pipeline.class_names),
                "sr_image": encode_image_to_base64(sr_image),
                "annotated_image": encode_image_to_base64(pipeline.annotate(sr_image, detections)),
            })
        except Exception as exc:
            return failure(exc, "/api/pipeline")

    return app


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    config = sys.argv[1] if len(sys.argv) > 1 else "default.cfg"
    print("Starting SR + detection server on http://127.0.0.1:5000")
    create_app(config).run(debug=False, port=5000)
