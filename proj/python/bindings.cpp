#include <pybind11/pybind11.h>
PYBIND11_MODULE(kamcore, m) { m.doc() = "placeholder"; }
