import math

import numpy as np
import pytest
from pytest import approx

from errors import CalibrationError, LabelParseError, PointCloudFormatError
from io_kitti import (Calibration, PointCloud, boxes_to_camera, camera_to_lidar_box, crop_to_range,
                      filter_by_image_frustum, format_kitti_line, load_labels, load_pointcloud,
                      parse_calibration, parse_label_lines, project_box_to_image, read_kitti_results,
                      save_pointcloud, write_kitti_results)

CALIB_TEXT = """P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
"""


def test_pointcloud_byte_roundtrip(tmp_path, rng):
    points = rng.uniform(0, 1, size=(100, 4)).astype(np.float32)
    path = tmp_path / "000000.bin"
    save_pointcloud(PointCloud(points), str(path))
    raw = path.read_bytes()
    loaded = load_pointcloud(str(path))
    assert loaded.points.tobytes() == raw
    assert loaded.rejected == 0


def test_out_of_range_reflectance_breaks_byte_roundtrip(tmp_path):
    points = np.array([[1, 2, 3, -0.25], [4, 5, 6, 2.0], [7, 8, 9, 0.5]], dtype=np.float32)
    path = tmp_path / "000001.bin"
    save_pointcloud(PointCloud(points), str(path))
    loaded = load_pointcloud(str(path))
    assert loaded.rejected == 0
    assert loaded.reflectance.tolist() == [0.0, 1.0, 0.5]
    assert np.array_equal(loaded.points[:, :3], points[:, :3])
    assert loaded.points.tobytes() != path.read_bytes()


def test_truncated_pointcloud_raises(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 17)
    with pytest.raises(PointCloudFormatError):
        load_pointcloud(str(path))


def test_nonfinite_records_are_dropped_and_reflectance_clamped(tmp_path):
    points = np.array([[1, 2, 3, 0.5], [np.nan, 0, 0, 0.1], [4, 5, 6, 1.7], [1, 1, np.inf, 0.2]], dtype=np.float32)
    path = tmp_path / "mixed.bin"
    points.tofile(str(path))
    cloud = load_pointcloud(str(path))
    assert len(cloud) == 2
    assert cloud.rejected == 2
    assert cloud.reflectance.max() == approx(1.0)


def test_crop_is_half_open():
    cloud = PointCloud(np.array([
        [0.0, -40.0, -3.0, 0.1],
        [70.4, 0.0, 0.0, 0.1],
        [10.0, 39.99, 0.99, 0.1],
        [10.0, 40.0, 0.0, 0.1],
    ], dtype=np.float32))
    cropped = crop_to_range(cloud, (-3.0, 1.0, -40.0, 40.0, 0.0, 70.4))
    assert len(cropped) == 2


def test_parse_calibration(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text(CALIB_TEXT)
    calib = parse_calibration(str(path))
    assert calib.proj[0, 0] == approx(721.5377)
    assert calib.rect.shape == (3, 3)
    xyz = np.array([[10.0, 2.0, -1.0], [30.0, -5.0, 0.5]])
    assert np.allclose(calib.rect_to_lidar(calib.lidar_to_rect(xyz)), xyz, atol=1e-9)


def test_missing_calibration_key_raises(tmp_path):
    path = tmp_path / "calib.txt"
    path.write_text("P2: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(CalibrationError):
        parse_calibration(str(path))


def test_singular_rect_raises():
    calib = Calibration(Calibration.default().velo_to_cam, np.zeros((3, 3)), Calibration.default().proj)
    with pytest.raises(CalibrationError):
        calib.rect_to_lidar(np.zeros((1, 3)))


def test_camera_to_lidar_box_with_default_calibration():
    calib = Calibration.default()
    # 相机坐标：前方 20m、右侧 2m、地面高 1.7m；ry = 0 表示车头朝相机 x 轴
    box = camera_to_lidar_box((2.0, 1.7, 20.0), (1.5, 1.6, 3.9), 0.0, calib)
    assert box.x == approx(20.0)
    assert box.y == approx(-2.0)
    assert box.z == approx(-1.7 + 0.75)
    assert (box.l, box.w, box.h) == approx((3.9, 1.6, 1.5))
    assert box.theta == approx(-math.pi / 2)


def test_boxes_to_camera_inverts_camera_to_lidar():
    calib = Calibration.default()
    box = camera_to_lidar_box((-3.0, 1.6, 15.0), (1.5, 1.7, 4.2), 0.3, calib)
    location, dims, ry = boxes_to_camera(box, calib)
    assert location[0].tolist() == approx([-3.0, 1.6, 15.0])
    assert dims[0].tolist() == approx([1.5, 1.7, 4.2])
    assert ry[0] == approx(0.3)


def test_parse_label_lines_splits_classes():
    calib = Calibration.default()
    lines = [
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59",
        "Pedestrian 0.00 1 0.21 423.17 173.67 433.17 224.03 1.60 0.38 0.30 -5.86 1.72 22.25 0.01",
        "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10",
        "Van 0.00 0 1.92 280.38 185.10 344.90 215.59 1.88 1.63 4.33 -15.71 2.16 38.26 1.53",
        "",
    ]
    labels = parse_label_lines(lines, calib)
    assert labels.classes == ["Car", "Pedestrian"]
    assert len(labels.dont_care) == 1
    assert labels.dropped == 1
    assert labels.records[1].occlusion == 1
    assert labels.records[0].bbox_height == approx(200.12 - 173.33)
    assert labels.boxes_of("Car").shape == (1, 7)


def test_short_label_line_reports_line_number():
    with pytest.raises(LabelParseError) as info:
        parse_label_lines(["Car 0 0 0 1 2 3 4 1.5 1.6 3.9 0 1.7 20.0 0.0",
                           "Car 0 0 0 1 2 3 4 1.5 1.6"], Calibration.default())
    assert info.value.line_number == 2


def test_result_lines_roundtrip(tmp_path):
    calib = Calibration.default()
    boxes = np.array([[20.0, -2.0, -0.9, 3.9, 1.6, 1.56, 0.4], [35.0, 5.0, -1.0, 4.1, 1.7, 1.5, -1.2]])
    path = tmp_path / "000001.txt"
    assert write_kitti_results(str(path), "Car", boxes, [0.9, 0.6], calib) == 2
    back = read_kitti_results(str(path), calib)
    assert np.allclose(np.array(back.boxes), boxes, atol=1e-5)
    assert [r.score for r in back.records] == approx([0.9, 0.6])


def test_label_line_without_score(tmp_path):
    calib = Calibration.default()
    line = format_kitti_line("Car", [20.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0], None, calib)
    assert len(line.split()) == 15
    path = tmp_path / "label.txt"
    path.write_text(line + "\n")
    labels = load_labels(str(path), calib)
    assert labels.records[0].score is None


def test_projected_box_inside_image():
    calib = Calibration.default()
    x1, y1, x2, y2 = project_box_to_image([20.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0], calib)
    assert 0 <= x1 < x2 <= calib.image_size[0]
    assert 0 <= y1 < y2 <= calib.image_size[1]
    assert project_box_to_image([-20.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0], calib) == (0.0, 0.0, 0.0, 0.0)


def test_frustum_filter_drops_points_behind_camera():
    cloud = PointCloud(np.array([[20.0, 0.0, -1.0, 0.5], [-20.0, 0.0, -1.0, 0.5], [5.0, 40.0, 0.0, 0.5]],
                                dtype=np.float32))
    kept = filter_by_image_frustum(cloud, Calibration.default())
    assert len(kept) == 1
    assert kept.points[0, 0] == approx(20.0)
