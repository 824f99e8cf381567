#pragma once

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

namespace vdu::oracle {

/// Fresh empty directory named after the running test.
inline std::filesystem::path temp_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("vdu_") + info->test_suite_name() + "_" + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace vdu::oracle
