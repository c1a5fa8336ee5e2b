#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "aligndet/box.hpp"
#include "aligndet/conv.hpp"
#include "aligndet/detector.hpp"
#include "aligndet/tensor.hpp"

namespace py = pybind11;
using namespace aligndet;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& arr) {
  std::vector<std::size_t> shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i)
    shape[std::size_t(i)] = std::size_t(arr.shape(i));
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> arr(shape);
  std::copy(t.data(), t.data() + t.numel(), arr.mutable_data());
  return arr;
}

ConvSpec spec_from_arrays(const py::array_t<double>& weights,
                          const py::array_t<double>& bias, int kh, int kw) {
  const Tensor w = tensor_from_array(weights);
  const Tensor b = tensor_from_array(bias);
  const int cout = int(w.dim(0));
  const int cin = int(w.dim(1)) / (kh * kw);
  ConvSpec spec(kh, kw, cin, cout);
  spec.weights = w;
  spec.bias = b;
  spec.check_weights();
  return spec;
}

std::vector<Box> boxes_from_array(const py::array_t<double>& arr) {
  auto a = arr.unchecked<2>();
  std::vector<Box> out;
  out.reserve(std::size_t(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    out.push_back(Box{a(i, 0), a(i, 1), a(i, 2), a(i, 3)});
  return out;
}

}  // namespace

PYBIND11_MODULE(_aligndet, m) {
  m.doc() = "conv/RoIAlign equivalence kernels and the RoIConv operator";

  py::class_<Box>(m, "Box")
      .def(py::init<double, double, double, double>(), py::arg("x1"), py::arg("y1"),
           py::arg("x2"), py::arg("y2"))
      .def_readwrite("x1", &Box::x1)
      .def_readwrite("y1", &Box::y1)
      .def_readwrite("x2", &Box::x2)
      .def_readwrite("y2", &Box::y2)
      .def("__repr__", [](const Box& b) {
        return "Box(" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " +
               std::to_string(b.x2) + ", " + std::to_string(b.y2) + ")";
      });

  m.def("gemm", [](const py::array_t<double>& a, const py::array_t<double>& b) {
    return array_from_tensor(gemm(tensor_from_array(a), tensor_from_array(b)));
  });

  m.def(
      "im2col",
      [](const py::array_t<double>& feature, int kh, int kw, int stride) {
        const Tensor t = tensor_from_array(feature);
        const FeatureMap f(t, stride);
        return array_from_tensor(im2col(f, ConvSpec(kh, kw, f.channels(), 1)));
      },
      py::arg("feature"), py::arg("kernel_h"), py::arg("kernel_w"),
      py::arg("stride") = 1);

  m.def(
      "conv_forward",
      [](const py::array_t<double>& feature, const py::array_t<double>& weights,
         const py::array_t<double>& bias, int kh, int kw, int stride) {
        const FeatureMap f(tensor_from_array(feature), stride);
        return array_from_tensor(conv_forward(f, spec_from_arrays(weights, bias, kh, kw)));
      },
      py::arg("feature"), py::arg("weights"), py::arg("bias"), py::arg("kernel_h"),
      py::arg("kernel_w"), py::arg("stride") = 1);

  m.def(
      "roialign",
      [](const py::array_t<double>& feature, const Box& roi, int out_h, int out_w,
         int stride) {
        const FeatureMap f(tensor_from_array(feature), stride);
        return array_from_tensor(roialign(f, roi, out_h, out_w));
      },
      py::arg("feature"), py::arg("roi"), py::arg("out_h"), py::arg("out_w"),
      py::arg("stride") = 1);

  m.def(
      "bilinear_sample",
      [](const py::array_t<double>& feature, double x, double y, int channel,
         int stride) {
        const FeatureMap f(tensor_from_array(feature), stride);
        return bilinear_sample(f, SamplePoint{x, y}, channel);
      },
      py::arg("feature"), py::arg("x"), py::arg("y"), py::arg("channel") = 0,
      py::arg("stride") = 1);

  m.def(
      "implicit_roi",
      [](int X, int Y, int kh, int kw, int stride) {
        return implicit_roi(X, Y, kh, kw, stride);
      },
      py::arg("x"), py::arg("y"), py::arg("kernel_h"), py::arg("kernel_w"),
      py::arg("stride"));

  m.def(
      "roiconv_offsets",
      [](const py::array_t<double>& anchors, int kh, int kw, int H, int W,
         int stride) {
        const ConvSpec spec(kh, kw, 1, 1);
        return array_from_tensor(
            roiconv_offsets(boxes_from_array(anchors), spec, H, W, stride).tensor);
      },
      py::arg("anchors"), py::arg("kernel_h"), py::arg("kernel_w"), py::arg("feat_h"),
      py::arg("feat_w"), py::arg("stride"));

  m.def(
      "deform_conv_forward",
      [](const py::array_t<double>& feature, const py::array_t<double>& weights,
         const py::array_t<double>& bias, int kh, int kw,
         const py::array_t<double>& offsets, int stride) {
        const FeatureMap f(tensor_from_array(feature), stride);
        const OffsetField off(tensor_from_array(offsets));
        return array_from_tensor(
            deform_conv_forward(f, spec_from_arrays(weights, bias, kh, kw), off));
      },
      py::arg("feature"), py::arg("weights"), py::arg("bias"), py::arg("kernel_h"),
      py::arg("kernel_w"), py::arg("offsets"), py::arg("stride") = 1);

  m.def("iou", &iou, py::arg("a"), py::arg("b"));

  m.def(
      "nms",
      [](const py::array_t<double>& boxes, const std::vector<double>& scores,
         double iou_thr) {
        const auto bs = boxes_from_array(boxes);
        std::vector<Detection> dets;
        for (std::size_t i = 0; i < bs.size(); ++i)
          dets.push_back({bs[i], scores[i], 0});
        std::vector<py::ssize_t> kept;
        for (const auto& d : nms(dets, iou_thr)) {
          for (std::size_t i = 0; i < bs.size(); ++i)
            if (bs[i].x1 == d.box.x1 && bs[i].y1 == d.box.y1 &&
                scores[i] == d.score) {
              kept.push_back(py::ssize_t(i));
              break;
            }
        }
        return kept;
      },
      py::arg("boxes"), py::arg("scores"), py::arg("iou_thr") = 0.5);

  m.def(
      "flop_count",
      [](const std::string& kind, int kh, int kw, int cin, int cout, int H, int W,
         bool with_offset_generation) {
        ConvOpKind k;
        if (kind == "conv")
          k = ConvOpKind::kConv;
        else if (kind == "deform_conv")
          k = ConvOpKind::kDeformConv;
        else if (kind == "roiconv")
          k = ConvOpKind::kRoiConv;
        else
          throw std::invalid_argument("unknown op kind: " + kind);
        return flop_count(k, kh, kw, cin, cout, H, W, with_offset_generation);
      },
      py::arg("kind"), py::arg("kernel_h"), py::arg("kernel_w"),
      py::arg("in_channels"), py::arg("out_channels"), py::arg("feat_h"),
      py::arg("feat_w"), py::arg("with_offset_generation") = false);
}
