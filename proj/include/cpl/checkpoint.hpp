#pragma once

#include <span>
#include <string>

#include "cpl/tensor.hpp"

namespace cpl {

// Directory container: manifest.json holds an array of
// {name, shape, dtype, byte_offset, byte_length}; weights.bin is the
// concatenated little-endian raw values in manifest order. Offsets are
// contiguous and their total equals the file size; save -> load -> save is
// byte-identical.
void save_checkpoint(const std::string& dir, std::span<const Param> params, Precision dtype);

// Fills each destination tensor by name; unknown names, shape mismatches or
// a weights file that disagrees with the manifest raise IntegrityError.
void load_checkpoint(const std::string& dir, std::span<Param> params);

Precision checkpoint_dtype(const std::string& dir);

} // namespace cpl
