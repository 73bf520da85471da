#pragma once

#include "magrelax/core.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace magrelax {

enum class RecordingFormat { csv };

// CSV: `time_s,sensor_id,axis,value_pT`, rows sorted by time then sensor id,
// leading `# key=value` lines carry metadata.
SensorRecording parse_recording(std::string_view text, std::string_view source = "<string>");
SensorRecording load_recording(const std::filesystem::path& path,
                               RecordingFormat format = RecordingFormat::csv);
std::string format_recording(const SensorRecording& rec);
void write_recording(const SensorRecording& rec, const std::filesystem::path& path);

// CSV: `id,x_mm,y_mm,z_mm,axes` after a `# grid_shape=RxC` (or `irregular`) line.
std::string format_array(const SensorArray& array);
SensorArray parse_array(std::string_view text, std::string_view source = "<string>");
SensorArray load_array(const std::filesystem::path& path);

}  // namespace magrelax
