// Command-line front end. Placeholder until the pipeline modules land.
#pragma once

namespace hymate {

inline int cli_main(int, char**) { return 0; }

}  // namespace hymate
