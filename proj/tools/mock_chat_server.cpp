// Copyright (c) 2026, The mergeforge authors
// SPDX-License-Identifier: Apache-2.0

// Offline chat-completion server driven by a script file; see
// tests/support/mock_chat_server.hpp for the script format.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "support/mock_chat_server.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Scripted chat-completion server for offline runs"};
    std::string script;
    int port = 0;
    app.add_option("--script", script, "Script JSON file")->required()->check(CLI::ExistingFile);
    app.add_option("--port", port, "Port on 127.0.0.1 (0 picks a free one)");
    CLI11_PARSE(app, argc, argv);

    std::ifstream in(script);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        mockchat::Server server(nlohmann::json::parse(ss.str()));
        server.serve_forever(port);
    } catch (const std::exception& e) {
        std::cerr << "mock_chat_server: " << e.what() << "\n";
        return 1;
    }
}
